//! The tri-modal fusion network.
//!
//! Seven steps from inputs to diagnosis:
//!
//! 1. the MFCC tensor runs through three BiLSTM -> dropout -> batch-norm
//!    blocks (all sequence-returning);
//! 2. the FAU block is flattened, repeated per timestep, and projected to
//!    the MFCC branch width by a per-timestep affine layer;
//! 3. both are concatenated along the feature axis;
//! 4. the fused sequence runs through one more BiLSTM -> dropout ->
//!    batch-norm block;
//! 5. the scalar text verdict is repeated and projected to the fusion
//!    width the same way;
//! 6. concatenated again;
//! 7. flattened into a leaky-ReLU dense ladder ending in a single sigmoid
//!    unit.

use super::layers::{
    concat_features, flatten, split_features, unflatten, BatchNorm, BiLstm, Dense, Dropout,
    LeakyRelu, Param, RepeatedDense,
};
use super::{FusionError, FusionHyperparams, SegmentBatch};
use crate::corpus::{FAU_INTENSITY_COLS, FAU_PRESENCE_COLS};
use crate::visualfeat::FAU_SEGMENT_ROWS;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// MFCC coefficients per frame consumed by the model.
pub const MFCC_FEATURES: usize = 60;
/// Flattened FAU block width: 240 rows x 20 columns.
pub const FAU_FLAT: usize = FAU_SEGMENT_ROWS * (FAU_INTENSITY_COLS + FAU_PRESENCE_COLS);

/// Derived per-stage tensor widths for a hyperparameter choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub t_frames: usize,
    /// Output width of the MFCC branch (2 x third-block units).
    pub mfcc_branch_width: usize,
    /// Width of the projected FAU tensor; equals the branch width.
    pub fau_projection_width: usize,
    /// Feature width after the first concatenation.
    pub concat_width: usize,
    /// Output width of the fusion block (2 x fusion units).
    pub fusion_width: usize,
    /// Width of the projected text verdict; equals the fusion width.
    pub llm_projection_width: usize,
    /// Flattened width entering the dense head.
    pub head_input: usize,
    pub dense_widths: Vec<usize>,
}

/// Computes the shape propagation without allocating any parameters.
pub fn shape_summary(h: &FusionHyperparams, t_frames: usize) -> ShapePlan {
    let mfcc_branch_width = 2 * h.bilstm3_units;
    let fusion_width = 2 * h.fusion_bilstm_units;
    ShapePlan {
        t_frames,
        mfcc_branch_width,
        fau_projection_width: mfcc_branch_width,
        concat_width: 2 * mfcc_branch_width,
        fusion_width,
        llm_projection_width: fusion_width,
        head_input: t_frames * 2 * fusion_width,
        dense_widths: h.dense_widths().to_vec(),
    }
}

struct MfccBlock {
    bilstm: BiLstm,
    dropout: Dropout,
    norm: BatchNorm,
}

pub struct FusionModel {
    pub hyperparams: FusionHyperparams,
    pub t_frames: usize,
    mfcc_blocks: Vec<MfccBlock>,
    fau_projection: RepeatedDense,
    fusion_block: MfccBlock,
    llm_projection: RepeatedDense,
    head: Vec<(Dense, LeakyRelu)>,
    output: Dense,
    dropout_rng: ChaCha8Rng,
    pub(super) adam_step: u64,
    init_seed: u64,
}

/// Builds the network with Glorot-uniform parameters drawn from `seed`.
/// Two builds from the same seed have identical parameter checksums.
pub fn build_model(
    h: &FusionHyperparams,
    t_frames: usize,
    seed: u64,
) -> Result<FusionModel, FusionError> {
    h.validate()?;
    if t_frames == 0 {
        return Err(FusionError::ShapeMismatch("t_frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = shape_summary(h, t_frames);

    let block_specs = [
        ("mfcc1", MFCC_FEATURES, h.bilstm1_units, h.dropout1),
        ("mfcc2", 2 * h.bilstm1_units, h.bilstm2_units, h.dropout2),
        ("mfcc3", 2 * h.bilstm2_units, h.bilstm3_units, h.dropout3),
    ];
    let mfcc_blocks = block_specs
        .iter()
        .map(|&(name, input, units, rate)| MfccBlock {
            bilstm: BiLstm::new(name, &mut rng, input, units),
            dropout: Dropout::new(rate),
            norm: BatchNorm::new(&format!("{name}.bn"), 2 * units),
        })
        .collect();

    let fau_projection =
        RepeatedDense::new("fau_proj", &mut rng, FAU_FLAT, plan.fau_projection_width, t_frames);
    let fusion_block = MfccBlock {
        bilstm: BiLstm::new("fusion", &mut rng, plan.concat_width, h.fusion_bilstm_units),
        dropout: Dropout::new(h.fusion_dropout),
        norm: BatchNorm::new("fusion.bn", plan.fusion_width),
    };
    let llm_projection =
        RepeatedDense::new("llm_proj", &mut rng, 1, plan.llm_projection_width, t_frames);

    let mut head = Vec::with_capacity(h.n_dense);
    let mut width = plan.head_input;
    for (i, &out) in plan.dense_widths.iter().enumerate() {
        head.push((Dense::new(&format!("head{i}"), &mut rng, width, out), LeakyRelu::default()));
        width = out;
    }
    let output = Dense::new("out", &mut rng, width, 1);

    Ok(FusionModel {
        hyperparams: h.clone(),
        t_frames,
        mfcc_blocks,
        fau_projection,
        fusion_block,
        llm_projection,
        head,
        output,
        dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f),
        adam_step: 0,
        init_seed: seed,
    })
}

impl FusionModel {
    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn shape_plan(&self) -> ShapePlan {
        shape_summary(&self.hyperparams, self.t_frames)
    }

    fn validate_batch(&self, batch: &SegmentBatch) -> Result<(), FusionError> {
        let (b, t, f) = batch.mfcc.dim();
        if t != self.t_frames || f != MFCC_FEATURES {
            return Err(FusionError::ShapeMismatch(format!(
                "mfcc batch is [{b} x {t} x {f}], model expects [_ x {} x {MFCC_FEATURES}]",
                self.t_frames
            )));
        }
        let (fb, rows, cols) = batch.fau.dim();
        if fb != b || rows * cols != FAU_FLAT {
            return Err(FusionError::ShapeMismatch(format!(
                "fau batch is [{fb} x {rows} x {cols}]"
            )));
        }
        if batch.llm.dim() != (b, 1) || batch.labels.len() != b || batch.interview_ids.len() != b {
            return Err(FusionError::ShapeMismatch("llm/label row count mismatch".into()));
        }
        batch.validate_llm_consistency()?;
        Ok(())
    }

    fn fau_flat(batch: &SegmentBatch) -> Array2<f64> {
        let (b, rows, cols) = batch.fau.dim();
        batch
            .fau
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, rows * cols))
            .expect("standard layout reshapes")
    }

    /// Training-mode forward pass; caches activations and returns logits.
    pub fn forward_train(&mut self, batch: &SegmentBatch) -> Result<Array1<f64>, FusionError> {
        self.validate_batch(batch)?;
        let mut x = batch.mfcc.clone();
        for block in &mut self.mfcc_blocks {
            x = block.bilstm.forward_train(&x);
            x = block.dropout.forward_train(&x, &mut self.dropout_rng);
            x = block.norm.forward_train(&x);
        }
        let fau = self.fau_projection.forward_train(&Self::fau_flat(batch));
        let mut fused = concat_features(&x, &fau);
        fused = self.fusion_block.bilstm.forward_train(&fused);
        fused = self.fusion_block.dropout.forward_train(&fused, &mut self.dropout_rng);
        fused = self.fusion_block.norm.forward_train(&fused);
        let llm = self.llm_projection.forward_train(&batch.llm);
        let combined = concat_features(&fused, &llm);
        let mut flat = flatten(&combined);
        for (dense, act) in &mut self.head {
            flat = act.forward_train(&dense.forward_train(&flat));
        }
        let logits = self.output.forward_train(&flat);
        Ok(logits.index_axis(Axis(1), 0).to_owned())
    }

    /// Backward pass from per-sample logit gradients; accumulates into the
    /// parameter gradients.
    pub fn backward(&mut self, dlogits: &Array1<f64>) {
        let d = dlogits.view().insert_axis(Axis(1)).to_owned();
        let mut d2 = self.output.backward(&d);
        for (dense, act) in self.head.iter_mut().rev() {
            d2 = dense.backward(&act.backward(&d2));
        }
        let fusion_width = 2 * self.hyperparams.fusion_bilstm_units;
        let d3 = unflatten(&d2, self.t_frames, 2 * fusion_width);
        let (d_fused, d_llm) = split_features(&d3, fusion_width);
        self.llm_projection.backward(&d_llm);

        let mut d_fused = self.fusion_block.norm.backward(&d_fused);
        d_fused = self.fusion_block.dropout.backward(&d_fused);
        d_fused = self.fusion_block.bilstm.backward(&d_fused);

        let branch_width = 2 * self.hyperparams.bilstm3_units;
        let (mut dx, d_fau) = split_features(&d_fused, branch_width);
        self.fau_projection.backward(&d_fau);
        for block in self.mfcc_blocks.iter_mut().rev() {
            dx = block.norm.backward(&dx);
            dx = block.dropout.backward(&dx);
            dx = block.bilstm.backward(&dx);
        }
    }

    fn logits_eval(&self, batch: &SegmentBatch) -> Result<Array1<f64>, FusionError> {
        self.validate_batch(batch)?;
        let mut x = batch.mfcc.clone();
        for block in &self.mfcc_blocks {
            x = block.bilstm.forward_eval(&x);
            x = block.dropout.forward_eval(&x);
            x = block.norm.forward_eval(&x);
        }
        let fau = self.fau_projection.forward_eval(&Self::fau_flat(batch));
        let mut fused = concat_features(&x, &fau);
        fused = self.fusion_block.bilstm.forward_eval(&fused);
        fused = self.fusion_block.dropout.forward_eval(&fused);
        fused = self.fusion_block.norm.forward_eval(&fused);
        let llm = self.llm_projection.forward_eval(&batch.llm);
        let combined = concat_features(&fused, &llm);
        let mut flat = flatten(&combined);
        for (dense, act) in &self.head {
            flat = act.forward_eval(&dense.forward_eval(&flat));
        }
        let logits = self.output.forward_eval(&flat);
        Ok(logits.index_axis(Axis(1), 0).to_owned())
    }

    /// Inference: dropout off, batch-norm on running statistics. Output is
    /// per-segment sigmoid probabilities in (0, 1).
    pub fn predict(&self, batch: &SegmentBatch) -> Result<Array1<f64>, FusionError> {
        Ok(self.logits_eval(batch)?.mapv(|z| 1.0 / (1.0 + (-z).exp())))
    }

    /// Visits every trainable parameter in a fixed order.
    pub(crate) fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in &mut self.mfcc_blocks {
            for cell in [&mut block.bilstm.fwd, &mut block.bilstm.bwd] {
                f(&mut cell.wx);
                f(&mut cell.wh);
                f(&mut cell.b);
            }
            f(&mut block.norm.gamma);
            f(&mut block.norm.beta);
        }
        f(&mut self.fau_projection.w);
        f(&mut self.fau_projection.b);
        for cell in [&mut self.fusion_block.bilstm.fwd, &mut self.fusion_block.bilstm.bwd] {
            f(&mut cell.wx);
            f(&mut cell.wh);
            f(&mut cell.b);
        }
        f(&mut self.fusion_block.norm.gamma);
        f(&mut self.fusion_block.norm.beta);
        f(&mut self.llm_projection.w);
        f(&mut self.llm_projection.b);
        for (dense, _) in &mut self.head {
            f(&mut dense.w);
            f(&mut dense.b);
        }
        f(&mut self.output.w);
        f(&mut self.output.b);
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.len());
        n
    }

    /// Content hash of all parameter values; equal for equal seeds.
    pub fn parameter_checksum(&mut self) -> String {
        let mut hasher = Sha256::new();
        self.for_each_param(&mut |p| {
            hasher.update(p.name.as_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    /// Adds `delta` to the parameter element at flat index `idx` (indices
    /// run over parameters in visiting order); used by the gradient check.
    pub fn perturb_parameter(&mut self, idx: usize, delta: f64) {
        let mut cursor = 0usize;
        self.for_each_param(&mut |p| {
            let len = p.value.len();
            if idx >= cursor && idx < cursor + len {
                let local = idx - cursor;
                let cols = p.value.ncols();
                p.value[(local / cols, local % cols)] += delta;
            }
            cursor += len;
        });
    }

    pub fn gradient_at(&mut self, idx: usize) -> f64 {
        let mut cursor = 0usize;
        let mut out = 0.0;
        self.for_each_param(&mut |p| {
            let len = p.value.len();
            if idx >= cursor && idx < cursor + len {
                let local = idx - cursor;
                let cols = p.grad.ncols();
                out = p.grad[(local / cols, local % cols)];
            }
            cursor += len;
        });
        out
    }

    /// Named tensors for checkpointing: parameters plus batch-norm running
    /// statistics.
    pub(crate) fn state_tensors(&mut self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| out.push((p.name.clone(), p.value.clone())));
        for block in self.mfcc_blocks.iter().chain(std::iter::once(&self.fusion_block)) {
            let prefix = block.norm.name_prefix();
            out.push((format!("{prefix}.running_mean"), block.norm.running_mean.clone()));
            out.push((format!("{prefix}.running_var"), block.norm.running_var.clone()));
        }
        out
    }

    pub(crate) fn load_state_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, Array2<f64>>,
    ) -> Result<(), FusionError> {
        let mut missing = Vec::new();
        self.for_each_param(&mut |p| match tensors.get(&p.name) {
            Some(t) if t.raw_dim() == p.value.raw_dim() => p.value.assign(t),
            Some(_) => missing.push(format!("{} (shape mismatch)", p.name)),
            None => missing.push(p.name.clone()),
        });
        for block in self.mfcc_blocks.iter_mut().chain(std::iter::once(&mut self.fusion_block)) {
            let prefix = block.norm.name_prefix();
            for (suffix, slot) in [
                ("running_mean", &mut block.norm.running_mean),
                ("running_var", &mut block.norm.running_var),
            ] {
                let name = format!("{prefix}.{suffix}");
                match tensors.get(&name) {
                    Some(t) if t.raw_dim() == slot.raw_dim() => slot.assign(t),
                    _ => missing.push(name),
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(FusionError::Checkpoint(format!("missing tensors: {}", missing.join(", "))))
        }
    }
}

pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{SegmentBatch, DENSE_LADDER};
    use ndarray::Array3;

    fn tiny_h() -> FusionHyperparams {
        FusionHyperparams {
            bilstm1_units: 4,
            dropout1: 0.0,
            bilstm2_units: 4,
            dropout2: 0.0,
            bilstm3_units: 4,
            dropout3: 0.0,
            n_dense: 4,
            fusion_bilstm_units: 4,
            fusion_dropout: 0.0,
            ..FusionHyperparams::default()
        }
    }

    fn tiny_batch(b: usize, t: usize, seed: u64) -> SegmentBatch {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SegmentBatch {
            mfcc: Array3::from_shape_fn((b, t, MFCC_FEATURES), |_| rng.gen_range(-1.0..1.0)),
            fau: Array3::from_shape_fn((b, FAU_SEGMENT_ROWS, 20), |_| rng.gen_range(-1.0..1.0)),
            llm: Array2::from_shape_fn((b, 1), |(r, _)| (r % 2) as f64),
            labels: Array1::from_shape_fn(b, |r| (r % 2) as f64),
            interview_ids: (0..b as u32).collect(),
        }
    }

    #[test]
    fn default_shape_plan_matches_derived_widths() {
        let plan = shape_summary(&FusionHyperparams::default(), 247);
        assert_eq!(plan.mfcc_branch_width, 128);
        assert_eq!(plan.fau_projection_width, 128);
        assert_eq!(plan.concat_width, 256);
        assert_eq!(plan.fusion_width, 128);
        assert_eq!(plan.llm_projection_width, 128);
        assert_eq!(plan.head_input, 247 * 256);
        assert_eq!(plan.dense_widths, vec![256, 128, 64, 32]);
        assert_eq!(&DENSE_LADDER[..4], &[256, 128, 64, 32]);
    }

    #[test]
    fn forward_of_zero_batch_is_in_unit_interval() {
        let model = build_model(&tiny_h(), 6, 3).unwrap();
        let mut batch = tiny_batch(3, 6, 1);
        batch.mfcc.fill(0.0);
        batch.fau.fill(0.0);
        batch.llm.fill(0.0);
        let probs = model.predict(&batch).unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let mut a = build_model(&tiny_h(), 6, 42).unwrap();
        let mut b = build_model(&tiny_h(), 6, 42).unwrap();
        let mut c = build_model(&tiny_h(), 6, 43).unwrap();
        assert_eq!(a.parameter_checksum(), b.parameter_checksum());
        assert_ne!(a.parameter_checksum(), c.parameter_checksum());
    }

    #[test]
    fn repeated_inference_is_deterministic_and_batch_invariant() {
        let model = build_model(&tiny_h(), 5, 7).unwrap();
        let batch = tiny_batch(8, 5, 2);
        let p1 = model.predict(&batch).unwrap();
        let p2 = model.predict(&batch).unwrap();
        assert_eq!(p1, p2);

        // Row 3 alone must produce the same probability as inside the batch.
        let single = SegmentBatch {
            mfcc: batch.mfcc.slice(ndarray::s![3..4, .., ..]).to_owned(),
            fau: batch.fau.slice(ndarray::s![3..4, .., ..]).to_owned(),
            llm: batch.llm.slice(ndarray::s![3..4, ..]).to_owned(),
            labels: batch.labels.slice(ndarray::s![3..4]).to_owned(),
            interview_ids: vec![batch.interview_ids[3]],
        };
        let p_single = model.predict(&single).unwrap();
        assert!((p_single[0] - p1[3]).abs() < 1e-5);
    }

    #[test]
    fn permuting_a_batch_permutes_outputs() {
        let model = build_model(&tiny_h(), 5, 9).unwrap();
        let batch = tiny_batch(6, 5, 4);
        let p = model.predict(&batch).unwrap();
        let perm = [5usize, 3, 1, 0, 4, 2];
        let permuted = SegmentBatch {
            mfcc: ndarray::stack(
                Axis(0),
                &perm.iter().map(|&i| batch.mfcc.index_axis(Axis(0), i)).collect::<Vec<_>>(),
            )
            .unwrap(),
            fau: ndarray::stack(
                Axis(0),
                &perm.iter().map(|&i| batch.fau.index_axis(Axis(0), i)).collect::<Vec<_>>(),
            )
            .unwrap(),
            llm: ndarray::stack(
                Axis(0),
                &perm.iter().map(|&i| batch.llm.index_axis(Axis(0), i)).collect::<Vec<_>>(),
            )
            .unwrap(),
            labels: perm.iter().map(|&i| batch.labels[i]).collect(),
            interview_ids: perm.iter().map(|&i| batch.interview_ids[i]).collect(),
        };
        let q = model.predict(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((q[k] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = build_model(&tiny_h(), 6, 3).unwrap();
        let batch = tiny_batch(2, 5, 1); // wrong t_frames
        assert!(matches!(model.predict(&batch), Err(FusionError::ShapeMismatch(_))));
    }
}
