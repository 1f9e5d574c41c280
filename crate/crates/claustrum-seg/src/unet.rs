//! The encoder-decoder segmentation network: four resolution levels by
//! default, double conv+BN+dropout blocks, transposed-conv upsampling with
//! skip concatenations, and a sigmoid pixel classifier.

use std::io::Read;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Mode, Scalar, Shape, Tape, TensorId};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 32,
            dropout_rate: 0.1,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            in_channels: 1,
            out_channels: 1,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels < 1 {
            return Err(Error::Config("depth and base_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0,1)".into()));
        }
        if self.bn_epsilon <= 0.0 || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bad batch-norm parameters".into()));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels at encoder level k (0-based): base * 2^k.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

/// One learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// L2 decay applies to conv/transposed-conv kernels only.
    pub weight_decay: bool,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnBuffers<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w1: usize,
    b1: usize,
    g1: usize,
    be1: usize,
    bn1: usize,
    w2: usize,
    b2: usize,
    g2: usize,
    be2: usize,
    bn2: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderIdx {
    up_w: usize,
    up_b: usize,
    block: BlockIdx,
}

/// The full parameter set plus architecture configuration.
///
/// Parameters are enumerated in a stable construction order; checkpoints
/// rely on it.
#[derive(Debug, Clone)]
pub struct UNetModel<T: Scalar> {
    pub config: UNetConfig,
    pub params: Vec<Param<T>>,
    pub bn: Vec<BnBuffers<T>>,
    encoder: Vec<BlockIdx>,
    bottleneck: BlockIdx,
    decoder: Vec<DecoderIdx>,
    head_w: usize,
    head_b: usize,
}

pub type UNet = UNetModel<f32>;

struct Builder<T: Scalar> {
    params: Vec<Param<T>>,
    bn: Vec<BnBuffers<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn he_tensor(&mut self, name: &str, shape: Shape, fan_in: usize, decay: bool) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let value: Vec<T> = (0..numel(shape))
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        self.push(name, shape, value, decay)
    }

    fn const_tensor(&mut self, name: &str, shape: Shape, v: f64) -> usize {
        let value = vec![T::from_f64(v); numel(shape)];
        self.push(name, shape, value, false)
    }

    fn push(&mut self, name: &str, shape: Shape, value: Vec<T>, decay: bool) -> usize {
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value,
            grad: vec![T::ZERO; n],
            weight_decay: decay,
        });
        self.params.len() - 1
    }

    fn bn_buffers(&mut self, channels: usize) -> usize {
        self.bn.push(BnBuffers {
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        });
        self.bn.len() - 1
    }

    fn double_block(&mut self, name: &str, c_in: usize, c_out: usize) -> BlockIdx {
        let w1 = self.he_tensor(&format!("{name}.conv1.w"), [c_out, c_in, 3, 3], c_in * 9, true);
        let b1 = self.const_tensor(&format!("{name}.conv1.b"), [c_out, 1, 1, 1], 0.0);
        let g1 = self.const_tensor(&format!("{name}.bn1.gamma"), [1, c_out, 1, 1], 1.0);
        let be1 = self.const_tensor(&format!("{name}.bn1.beta"), [1, c_out, 1, 1], 0.0);
        let bn1 = self.bn_buffers(c_out);
        let w2 = self.he_tensor(&format!("{name}.conv2.w"), [c_out, c_out, 3, 3], c_out * 9, true);
        let b2 = self.const_tensor(&format!("{name}.conv2.b"), [c_out, 1, 1, 1], 0.0);
        let g2 = self.const_tensor(&format!("{name}.bn2.gamma"), [1, c_out, 1, 1], 1.0);
        let be2 = self.const_tensor(&format!("{name}.bn2.beta"), [1, c_out, 1, 1], 0.0);
        let bn2 = self.bn_buffers(c_out);
        BlockIdx {
            w1,
            b1,
            g1,
            be1,
            bn1,
            w2,
            b2,
            g2,
            be2,
            bn2,
        }
    }
}

/// Build a model with He-normal kernels, zero biases, unit gammas; fully
/// determined by `config.seed`.
pub fn build_model<T: Scalar>(config: &UNetConfig) -> Result<UNetModel<T>> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        bn: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut encoder = Vec::with_capacity(config.depth);
    let mut c_in = config.in_channels;
    for level in 0..config.depth {
        let c_out = config.level_channels(level);
        encoder.push(b.double_block(&format!("enc{level}"), c_in, c_out));
        c_in = c_out;
    }
    let bottleneck_ch = config.level_channels(config.depth);
    let bottleneck = b.double_block("bottleneck", c_in, bottleneck_ch);

    let mut decoder = Vec::with_capacity(config.depth);
    let mut cur = bottleneck_ch;
    for level in (0..config.depth).rev() {
        let c_out = config.level_channels(level);
        let up_w = b.he_tensor(
            &format!("dec{level}.up.w"),
            [cur, c_out, 2, 2],
            cur * 4,
            true,
        );
        let up_b = b.const_tensor(&format!("dec{level}.up.b"), [c_out, 1, 1, 1], 0.0);
        let block = b.double_block(&format!("dec{level}"), 2 * c_out, c_out);
        decoder.push(DecoderIdx { up_w, up_b, block });
        cur = c_out;
    }
    let head_w = b.he_tensor(
        "head.w",
        [config.out_channels, cur, 3, 3],
        cur * 9,
        true,
    );
    let head_b = b.const_tensor("head.b", [config.out_channels, 1, 1, 1], 0.0);

    Ok(UNetModel {
        config: config.clone(),
        params: b.params,
        bn: b.bn,
        encoder,
        bottleneck,
        decoder,
        head_w,
        head_b,
    })
}

/// Output of a forward pass: the sigmoid map plus the tape leaves each
/// parameter was loaded into, for routing gradients back after `backward`.
pub struct ForwardPass {
    pub output: TensorId,
    pub param_leaves: Vec<(usize, TensorId)>,
}

impl<T: Scalar> UNetModel<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Closed-form learnable-parameter count for the configured ladder.
    pub fn expected_parameter_count(config: &UNetConfig) -> usize {
        let dbl = |c_in: usize, c_out: usize| {
            // two convs with bias + two BN (gamma, beta)
            c_out * c_in * 9 + c_out + c_out * c_out * 9 + c_out + 4 * c_out
        };
        let mut total = 0;
        let mut c_in = config.in_channels;
        for level in 0..config.depth {
            let c_out = config.level_channels(level);
            total += dbl(c_in, c_out);
            c_in = c_out;
        }
        let bott = config.level_channels(config.depth);
        total += dbl(c_in, bott);
        let mut cur = bott;
        for level in (0..config.depth).rev() {
            let c_out = config.level_channels(level);
            total += cur * c_out * 4 + c_out; // transposed conv
            total += dbl(2 * c_out, c_out);
            cur = c_out;
        }
        total += config.out_channels * cur * 9 + config.out_channels;
        total
    }

    fn leaf(
        &self,
        tape: &mut Tape<T>,
        leaves: &mut Vec<(usize, TensorId)>,
        idx: usize,
        external: Option<&[TensorId]>,
    ) -> TensorId {
        let id = match external {
            Some(ext) => ext[idx],
            None => {
                let p = &self.params[idx];
                tape.leaf(p.shape, p.value.clone())
            }
        };
        leaves.push((idx, id));
        id
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &mut self,
        tape: &mut Tape<T>,
        leaves: &mut Vec<(usize, TensorId)>,
        block: BlockIdx,
        mut x: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        external: Option<&[TensorId]>,
    ) -> Result<TensorId> {
        let momentum = T::from_f64(self.config.bn_momentum);
        let epsilon = T::from_f64(self.config.bn_epsilon);
        let rate = self.config.dropout_rate;
        for (w, b, g, be, bn) in [
            (block.w1, block.b1, block.g1, block.be1, block.bn1),
            (block.w2, block.b2, block.g2, block.be2, block.bn2),
        ] {
            let wi = self.leaf(tape, leaves, w, external);
            let bi = self.leaf(tape, leaves, b, external);
            let gi = self.leaf(tape, leaves, g, external);
            let bei = self.leaf(tape, leaves, be, external);
            x = tape.conv2d(x, wi, bi)?;
            let buffers = &mut self.bn[bn];
            x = tape.batchnorm(
                x,
                gi,
                bei,
                &mut buffers.running_mean,
                &mut buffers.running_var,
                momentum,
                epsilon,
                mode,
            )?;
            x = tape.relu(x);
            x = tape.dropout(x, rate, mode, rng)?;
        }
        Ok(x)
    }

    /// Run the network on a tape. Train mode updates BN running statistics
    /// and applies dropout from `rng`; eval mode is deterministic.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        self.forward_impl(tape, input, mode, rng, None)
    }

    /// Forward pass reading parameters from caller-supplied tape leaves
    /// (one per parameter, in enumeration order) instead of the stored
    /// values; gradient verification uses this to differentiate through
    /// the parameters themselves.
    pub fn forward_with_param_leaves(
        &mut self,
        tape: &mut Tape<T>,
        input: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        param_leaves: &[TensorId],
    ) -> Result<ForwardPass> {
        if param_leaves.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter leaves, got {}",
                self.params.len(),
                param_leaves.len()
            )));
        }
        self.forward_impl(tape, input, mode, rng, Some(param_leaves))
    }

    fn forward_impl(
        &mut self,
        tape: &mut Tape<T>,
        input: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        external: Option<&[TensorId]>,
    ) -> Result<ForwardPass> {
        let [_, c, h, w] = tape.shape(input);
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.config.in_channels),
                found: format!("{c}"),
            });
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Invalid(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        let mut leaves = Vec::new();
        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        let encoder = self.encoder.clone();
        for block in encoder {
            x = self.run_block(tape, &mut leaves, block, x, mode, rng, external)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        let bottleneck = self.bottleneck;
        x = self.run_block(tape, &mut leaves, bottleneck, x, mode, rng, external)?;
        let decoder = self.decoder.clone();
        for (stage, dec) in decoder.into_iter().enumerate() {
            let wi = self.leaf(tape, &mut leaves, dec.up_w, external);
            let bi = self.leaf(tape, &mut leaves, dec.up_b, external);
            x = tape.transposed_conv2(x, wi, bi)?;
            let skip = skips[self.config.depth - 1 - stage];
            debug_assert_eq!(
                [tape.shape(skip)[2], tape.shape(skip)[3]],
                [tape.shape(x)[2], tape.shape(x)[3]],
                "skip and upsampled features must agree spatially"
            );
            x = tape.concat_channels(skip, x)?;
            x = self.run_block(tape, &mut leaves, dec.block, x, mode, rng, external)?;
        }
        let wi = self.leaf(tape, &mut leaves, self.head_w, external);
        let bi = self.leaf(tape, &mut leaves, self.head_b, external);
        x = tape.conv2d(x, wi, bi)?;
        let output = tape.sigmoid(x);
        Ok(ForwardPass {
            output,
            param_leaves: leaves,
        })
    }

    /// Copy gradients from tape leaves back into the parameter store.
    pub fn harvest_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass) {
        for &(idx, leaf) in &pass.param_leaves {
            let g = tape.grad(leaf);
            for (dst, &src) in self.params[idx].grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Eval-mode forward on raw pixel data, returning probabilities.
    pub fn infer(&mut self, input: &[T], shape: Shape) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(shape, input.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.output).to_vec())
    }

    /// Eval-mode forward followed by thresholding: pixel = 1 iff p > threshold.
    pub fn predict_mask(&mut self, input: &[T], shape: Shape, threshold: f64) -> Result<Vec<T>> {
        let probs = self.infer(input, shape)?;
        let t = T::from_f64(threshold);
        Ok(probs
            .into_iter()
            .map(|p| if p > t { T::ONE } else { T::ZERO })
            .collect())
    }
}

impl UNetModel<f32> {
    /// Versioned binary checkpoint: magic, version, JSON config, parameters
    /// and BN running stats as little-endian f32 in enumeration order.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut v = [0u8; 4];
        LittleEndian::write_u32(&mut v, CHECKPOINT_VERSION);
        out.extend_from_slice(&v);
        let config = serde_json::to_vec(&self.config)?;
        LittleEndian::write_u32(&mut v, config.len() as u32);
        out.extend_from_slice(&v);
        out.extend_from_slice(&config);
        for p in &self.params {
            for &x in &p.value {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for b in &self.bn {
            for &x in b.running_mean.iter().chain(&b.running_var) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        // write-then-rename so interrupted runs leave no partial checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNetModel<f32>> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let clen = LittleEndian::read_u32(&bytes[8..12]) as usize;
        if bytes.len() < 12 + clen {
            return Err(Error::Checkpoint("truncated config block".into()));
        }
        let config: UNetConfig = serde_json::from_slice(&bytes[12..12 + clen])?;
        let mut model: UNetModel<f32> = build_model(&config)?;
        let mut off = 12 + clen;
        let mut take = |dst: &mut [f32]| -> Result<()> {
            let need = dst.len() * 4;
            if bytes.len() < off + need {
                return Err(Error::Checkpoint("truncated parameter payload".into()));
            }
            for (i, x) in dst.iter_mut().enumerate() {
                *x = f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap());
            }
            off += need;
            Ok(())
        };
        for p in model.params.iter_mut() {
            take(&mut p.value)?;
        }
        for b in model.bn.iter_mut() {
            take(&mut b.running_mean)?;
            take(&mut b.running_var)?;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after parameters",
                bytes.len() - off
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn channel_ladder_default_config() {
        let c = UNetConfig::default();
        let ladder: Vec<usize> = (0..c.depth).map(|l| c.level_channels(l)).collect();
        assert_eq!(ladder, vec![32, 64, 128, 256]);
        assert_eq!(c.level_channels(c.depth), 512);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a: UNet = build_model(&small_config()).unwrap();
        let b: UNet = build_model(&small_config()).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
        let c: UNet = build_model(&UNetConfig {
            seed: 4,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.params[0].value, c.params[0].value);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [small_config(), UNetConfig::default()] {
            let m: UNet = build_model(&cfg).unwrap();
            assert_eq!(m.parameter_count(), UNet::expected_parameter_count(&cfg));
        }
    }

    #[test]
    fn forward_preserves_shape_and_range() {
        let mut m: UNet = build_model(&small_config()).unwrap();
        let input = vec![0.5f32; 32 * 32];
        let out = m.infer(&input, [1, 1, 32, 32]).unwrap();
        assert_eq!(out.len(), 32 * 32);
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let mut m: UNet = build_model(&small_config()).unwrap();
        assert!(m.infer(&vec![0.0; 30 * 32], [1, 1, 30, 32]).is_err());
        assert!(m.infer(&vec![0.0; 2 * 32 * 32], [1, 2, 32, 32]).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m: UNet = build_model(&small_config()).unwrap();
        let input: Vec<f32> = (0..32 * 32).map(|i| (i % 7) as f32 / 7.0).collect();
        let a = m.infer(&input, [1, 1, 32, 32]).unwrap();
        let b = m.infer(&input, [1, 1, 32, 32]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_mask_thresholds() {
        let mut m: UNet = build_model(&small_config()).unwrap();
        let input = vec![0.3f32; 32 * 32];
        let mask = m.predict_mask(&input, [1, 1, 32, 32], 0.5).unwrap();
        assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
        // threshold 0: sigmoid is strictly positive, so everything is 1
        let all = m.predict_mask(&input, [1, 1, 32, 32], 0.0).unwrap();
        assert!(all.iter().all(|&v| v == 1.0));
        let rerun = m.predict_mask(&input, [1, 1, 32, 32], 0.5).unwrap();
        assert_eq!(mask, rerun);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let mut m: UNet = build_model(&small_config()).unwrap();
        // move BN stats off their init values
        let input: Vec<f32> = (0..2 * 32 * 32).map(|i| (i % 11) as f32).collect();
        let mut tape = Tape::new();
        let x = tape.leaf([2, 1, 32, 32], input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();

        m.save_checkpoint(&p).unwrap();
        let mut loaded = UNet::load_checkpoint(&p).unwrap();
        let probe = vec![0.4f32; 32 * 32];
        let a = m.infer(&probe, [1, 1, 32, 32]).unwrap();
        let b = loaded.infer(&probe, [1, 1, 32, 32]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_is_self_describing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m: UNet = build_model(&small_config()).unwrap();
        m.save_checkpoint(&p).unwrap();
        let loaded = UNet::load_checkpoint(&p).unwrap();
        assert_eq!(loaded.config.depth, 2);
        assert_eq!(loaded.config.base_channels, 4);
    }

    #[test]
    fn tampered_checkpoint_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m: UNet = build_model(&small_config()).unwrap();
        m.save_checkpoint(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            UNet::load_checkpoint(&p),
            Err(Error::Checkpoint(_))
        ));

        let bytes = std::fs::read(&p).unwrap();
        let mut short = bytes.clone();
        short[0..4].copy_from_slice(CHECKPOINT_MAGIC);
        short.truncate(bytes.len() - 100);
        std::fs::write(&p, &short).unwrap();
        assert!(UNet::load_checkpoint(&p).is_err());
    }

    #[test]
    fn full_model_gradient_check_depth2() {
        use crate::tensor::gradient_check;
        // tiny f64 model on a 16x16 input; analytic grads for every parameter
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 2,
            dropout_rate: 0.0,
            seed: 9,
            ..Default::default()
        };
        let model: UNetModel<f64> = build_model(&cfg).unwrap();
        let input: Vec<f64> = (0..256).map(|i| ((i * 37) % 97) as f64 / 97.0).collect();
        let target: Vec<f64> = (0..256).map(|i| f64::from(i % 13 == 0)).collect();

        let mut inputs = vec![([1, 1, 16, 16], input)];
        for p in &model.params {
            inputs.push((p.shape, p.value.clone()));
        }
        let n_params = model.params.len();
        let cfg2 = cfg.clone();
        let rep = gradient_check("unet-depth2", &inputs, 1e-3, move |tape| {
            let mut m: UNetModel<f64> = build_model(&cfg2).unwrap();
            let x = TensorId(0);
            let param_leaves: Vec<TensorId> = (1..=n_params).map(TensorId).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pass = m.forward_with_param_leaves(tape, x, Mode::Train, &mut rng, &param_leaves)?;
            let loss = tape.weighted_bce(pass.output, &target, 0.3, 1e-7)?;
            let mut checked = vec![x];
            checked.extend(param_leaves);
            Ok((loss, checked))
        })
        .unwrap();
        assert!(rep.pass, "{rep}");
    }
}
