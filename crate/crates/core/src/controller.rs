//! The learned precision controller: a 3-layer ReLU MLP that maps
//! standardized saliency features to a distribution over the four
//! storage classes, plus a binary artifact format so a trained
//! controller can be reused across runs.

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::quant::BitWidth;
use crate::saliency::{FeatureStats, SaliencyFeatures};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const INPUT_DIM: usize = 4;
pub const HIDDEN_DIM: usize = 128;
pub const NUM_CLASSES: usize = 4;

/// Weights and biases of the three linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix, // HIDDEN_DIM x INPUT_DIM
    pub b1: Vec<f64>,
    pub w2: Matrix, // HIDDEN_DIM x HIDDEN_DIM
    pub b2: Vec<f64>,
    pub w3: Matrix, // NUM_CLASSES x HIDDEN_DIM
    pub b3: Vec<f64>,
}

impl MlpParams {
    pub fn zeros() -> Self {
        MlpParams {
            w1: Matrix::zeros(HIDDEN_DIM, INPUT_DIM),
            b1: vec![0.0; HIDDEN_DIM],
            w2: Matrix::zeros(HIDDEN_DIM, HIDDEN_DIM),
            b2: vec![0.0; HIDDEN_DIM],
            w3: Matrix::zeros(NUM_CLASSES, HIDDEN_DIM),
            b3: vec![0.0; NUM_CLASSES],
        }
    }

    /// Visit every parameter tensor as a mutable flat slice, in a
    /// fixed order shared by the optimizer and the artifact format.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.w3.data,
            &mut self.b3,
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
            &self.w3.data,
            &self.b3,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Trained controller state: MLP parameters plus the feature
/// statistics the features must be standardized with.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub mlp: MlpParams,
    pub feature_stats: FeatureStats,
}

/// Layer activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: [f64; 4],
    pub z1: Vec<f64>,
    pub h1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: [f64; 4],
}

/// Run the MLP on standardized features:
/// `o = W3·relu(W2·relu(W1·s + b1) + b2) + b3`.
pub fn forward(params: &ControllerParams, s: &SaliencyFeatures) -> Result<[f64; 4]> {
    Ok(forward_trace(&params.mlp, s)?.logits)
}

/// Like [`forward`] but keeps intermediate activations for training.
pub fn forward_trace(mlp: &MlpParams, s: &SaliencyFeatures) -> Result<ForwardTrace> {
    if !s.is_finite() {
        return Err(Error::invalid_input(
            "controller features must be finite",
        ));
    }
    let input = s.as_array();
    let mut z1 = mlp.w1.matvec(&input);
    for (z, b) in z1.iter_mut().zip(&mlp.b1) {
        *z += b;
    }
    let h1: Vec<f64> = z1.iter().map(|&z| math::relu(z)).collect();
    let mut z2 = mlp.w2.matvec(&h1);
    for (z, b) in z2.iter_mut().zip(&mlp.b2) {
        *z += b;
    }
    let h2: Vec<f64> = z2.iter().map(|&z| math::relu(z)).collect();
    let mut o = mlp.w3.matvec(&h2);
    for (z, b) in o.iter_mut().zip(&mlp.b3) {
        *z += b;
    }
    let logits = [o[0], o[1], o[2], o[3]];
    Ok(ForwardTrace {
        input,
        z1,
        h1,
        z2,
        h2,
        logits,
    })
}

/// Softmax over the four class logits.
pub fn class_probs(logits: &[f64; 4]) -> [f64; 4] {
    let p = math::softmax(logits);
    [p[0], p[1], p[2], p[3]]
}

/// Argmax class mapped to its bit-width; ties break toward the lowest
/// width among the tied classes.
pub fn select_bitwidth(probs: &[f64; 4]) -> BitWidth {
    BitWidth::from_index(math::argmax(probs)).expect("argmax index in range")
}

/// Fresh untrained parameters: per-layer uniform
/// `(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))` weights,
/// zero biases, identity feature statistics.
pub fn init_params(seed: u64) -> ControllerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = MlpParams::zeros();
    fill_uniform(&mut mlp.w1, INPUT_DIM, HIDDEN_DIM, &mut rng);
    fill_uniform(&mut mlp.w2, HIDDEN_DIM, HIDDEN_DIM, &mut rng);
    fill_uniform(&mut mlp.w3, HIDDEN_DIM, NUM_CLASSES, &mut rng);
    ControllerParams {
        mlp,
        feature_stats: FeatureStats::identity(),
    }
}

fn fill_uniform(m: &mut Matrix, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in m.iter_mut() {
        *w = rng.gen_range(-bound..=bound);
    }
}

// Artifact format, version 1, little-endian:
//   magic "KVBC" | u32 version | u32 input | u32 hidden | u32 classes
//   | W1 | b1 | W2 | b2 | W3 | b3 | feature mean (4) | feature std (4)
// All parameter payloads are f64.
const MAGIC: &[u8; 4] = b"KVBC";
const FORMAT_VERSION: u32 = 1;

pub fn save_controller(params: &ControllerParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [INPUT_DIM, HIDDEN_DIM, NUM_CLASSES] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for tensor in params.mlp.tensors() {
        for &v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in &params.feature_stats.mean {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &params.feature_stats.std {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_controller(path: &Path) -> Result<ControllerParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::ControllerFormat("file truncated".into()));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        let s = take(cursor, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::ControllerFormat("bad magic".into()));
    }
    let version = take_u32(&mut cursor)?;
    if version != FORMAT_VERSION {
        return Err(Error::ControllerFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let dims = [
        take_u32(&mut cursor)? as usize,
        take_u32(&mut cursor)? as usize,
        take_u32(&mut cursor)? as usize,
    ];
    if dims != [INPUT_DIM, HIDDEN_DIM, NUM_CLASSES] {
        return Err(Error::ControllerFormat(format!(
            "unexpected shapes {dims:?}; expected [{INPUT_DIM}, {HIDDEN_DIM}, {NUM_CLASSES}]"
        )));
    }

    let mut mlp = MlpParams::zeros();
    for tensor in mlp.tensors_mut() {
        for v in tensor.iter_mut() {
            let s = take(&mut cursor, 8)?;
            *v = f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]);
        }
    }
    let mut stats = FeatureStats::identity();
    for v in stats.mean.iter_mut().chain(stats.std.iter_mut()) {
        let s = take(&mut cursor, 8)?;
        *v = f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]);
    }
    if cursor != bytes.len() {
        return Err(Error::ControllerFormat("trailing bytes".into()));
    }
    let params = ControllerParams {
        mlp,
        feature_stats: stats,
    };
    if !params.mlp.is_finite() {
        return Err(Error::ControllerFormat("non-finite parameters".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(a: [f64; 4]) -> SaliencyFeatures {
        SaliencyFeatures::from_array(a)
    }

    #[test]
    fn zero_params_map_everything_to_zero_logits() {
        let params = ControllerParams {
            mlp: MlpParams::zeros(),
            feature_stats: FeatureStats::identity(),
        };
        let o = forward(&params, &features([3.0, -1.0, 0.5, 2.0])).unwrap();
        assert_eq!(o, [0.0; 4]);
    }

    #[test]
    fn output_bias_passes_through_zero_weights() {
        let mut mlp = MlpParams::zeros();
        mlp.b3 = vec![1.0, 2.0, 3.0, 4.0];
        let params = ControllerParams {
            mlp,
            feature_stats: FeatureStats::identity(),
        };
        let o = forward(&params, &features([0.7; 4])).unwrap();
        assert_eq!(o, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_path_params_match_hand_computation() {
        // Wire one hidden unit straight through so o = [relu(s·w), 0, 0, 0].
        let w = [0.3, 0.2, 0.4, 0.1];
        let mut mlp = MlpParams::zeros();
        for (c, &wc) in w.iter().enumerate() {
            mlp.w1.set(0, c, wc);
        }
        mlp.w2.set(0, 0, 1.0);
        mlp.w3.set(0, 0, 1.0);
        let params = ControllerParams {
            mlp,
            feature_stats: FeatureStats::identity(),
        };

        let s = [1.0, 0.5, -0.25, 2.0];
        // s·w = 0.3 + 0.1 - 0.1 + 0.2 = 0.5
        let o = forward(&params, &features(s)).unwrap();
        assert!((o[0] - 0.5).abs() < 1e-15);
        assert_eq!(&o[1..], &[0.0, 0.0, 0.0]);

        // Negative pre-activation is clamped by the first ReLU.
        let o = forward(&params, &features([-10.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(o, [0.0; 4]);
    }

    #[test]
    fn forward_rejects_non_finite_features() {
        let params = init_params(0);
        assert!(forward(&params, &features([f64::NAN, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn class_probs_uniform_saturated_and_log_integer_cases() {
        let p = class_probs(&[0.0; 4]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let p = class_probs(&[1000.0, 0.0, 0.0, 0.0]);
        assert!(p[0] > 1.0 - 1e-12);

        let p = class_probs(&[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        let expected = [0.1, 0.2, 0.3, 0.4];
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn select_bitwidth_breaks_ties_toward_lowest() {
        assert_eq!(select_bitwidth(&[0.25; 4]), BitWidth::B2);
        assert_eq!(select_bitwidth(&[0.1, 0.2, 0.3, 0.4]), BitWidth::B16);
        assert_eq!(select_bitwidth(&[0.4, 0.4, 0.1, 0.1]), BitWidth::B2);
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let a = init_params(42);
        let b = init_params(42);
        assert_eq!(a, b);
        let c = init_params(43);
        assert_ne!(a, c);
    }

    #[test]
    fn init_weights_respect_fan_bound() {
        let params = init_params(7);
        let bound_w1 = (6.0 / 132.0f64).sqrt();
        assert!(params.mlp.w1.data.iter().all(|w| w.abs() <= bound_w1));
        let bound_w2 = (6.0 / 256.0f64).sqrt();
        assert!(params.mlp.w2.data.iter().all(|w| w.abs() <= bound_w2));
        assert!(params.mlp.w3.data.iter().all(|w| w.abs() <= bound_w1));
        assert!(params.mlp.b1.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn artifact_roundtrip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("controller.bin");
        let mut params = init_params(99);
        params.feature_stats = FeatureStats {
            mean: [1.0, 2.0, 3.0, 4.0],
            std: [0.5, 0.25, 2.0, 1.0],
        };
        save_controller(&params, &path).unwrap();
        let loaded = load_controller(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn artifact_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("controller.bin");
        let params = init_params(1);
        save_controller(&params, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_controller(&path).is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'K';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_controller(&path).is_err());
    }

    proptest! {
        #[test]
        fn probs_shift_invariant_so_selection_is_too(
            o in proptest::array::uniform4(-30.0f64..30.0),
            c in -50.0f64..50.0,
        ) {
            let shifted = [o[0] + c, o[1] + c, o[2] + c, o[3] + c];
            let p = class_probs(&o);
            let q = class_probs(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(select_bitwidth(&p), select_bitwidth(&q));
        }

        #[test]
        fn forward_is_finite_on_large_inputs(
            s in proptest::array::uniform4(-1e6f64..1e6),
            seed in 0u64..32,
        ) {
            let params = init_params(seed);
            let o = forward(&params, &features(s)).unwrap();
            prop_assert!(o.iter().all(|v| v.is_finite()));
            let b = select_bitwidth(&class_probs(&o));
            prop_assert!(matches!(b, BitWidth::B2 | BitWidth::B4 | BitWidth::B8 | BitWidth::B16));
        }
    }
}
