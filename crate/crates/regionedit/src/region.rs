//! Instruction-conditioned region prediction.
//!
//! Patch features from the frozen vision encoder are fused with instruction
//! token features by single-head cross-attention, refined by single-head
//! self-attention, and mapped token-wise through an MLP + sigmoid into a
//! per-patch edit probability. Thresholding happens only at inference; the
//! soft probabilities drive training.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The trainable fusion parameters: query/key/value projections for the
/// cross- and self-attention stages plus the region MLP (d -> 2d -> 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub d: usize,
    wq_c: Tensor,
    wk_c: Tensor,
    wv_c: Tensor,
    wq_s: Tensor,
    wk_s: Tensor,
    wv_s: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

pub struct BoundFusion {
    wq_c: Var,
    wk_c: Var,
    wv_c: Var,
    wq_s: Var,
    wk_s: Var,
    wv_s: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
    d: usize,
}

const FIELD_NAMES: [&str; 10] = [
    "wq_c", "wk_c", "wv_c", "wq_s", "wk_s", "wv_s", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
];

impl FusionWeights {
    pub fn init(rng: &mut Prng, d: usize) -> Self {
        Self {
            d,
            wq_c: rng::init_tensor(rng, vec![d, d], d),
            wk_c: rng::init_tensor(rng, vec![d, d], d),
            wv_c: rng::init_tensor(rng, vec![d, d], d),
            wq_s: rng::init_tensor(rng, vec![d, d], d),
            wk_s: rng::init_tensor(rng, vec![d, d], d),
            wv_s: rng::init_tensor(rng, vec![d, d], d),
            mlp_w1: rng::init_tensor(rng, vec![d, 2 * d], d),
            mlp_b1: Tensor::zeros(vec![2 * d]),
            mlp_w2: rng::init_tensor(rng, vec![2 * d, 1], 2 * d),
            mlp_b2: Tensor::zeros(vec![1]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq_c, &self.wk_c, &self.wv_c, &self.wq_s, &self.wk_s, &self.wv_s,
            &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq_c,
            &mut self.wk_c,
            &mut self.wv_c,
            &mut self.wq_s,
            &mut self.wk_s,
            &mut self.wv_s,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFusion {
        let mut vs = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable));
        BoundFusion {
            wq_c: vs.next().unwrap(),
            wk_c: vs.next().unwrap(),
            wv_c: vs.next().unwrap(),
            wq_s: vs.next().unwrap(),
            wk_s: vs.next().unwrap(),
            wv_s: vs.next().unwrap(),
            mlp_w1: vs.next().unwrap(),
            mlp_b1: vs.next().unwrap(),
            mlp_w2: vs.next().unwrap(),
            mlp_b2: vs.next().unwrap(),
            d: self.d,
        }
    }

    pub fn save_into(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(&format!("{prefix}.meta"), Tensor::from_vec(vec![self.d as f64]))?;
        for (name, t) in FIELD_NAMES.iter().zip(self.tensors()) {
            ck.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get_shaped(&format!("{prefix}.meta"), &[1])?;
        let d = meta.data()[0] as usize;
        let mut r = rng::seeded(0);
        let mut w = Self::init(&mut r, d);
        for (name, t) in FIELD_NAMES.iter().zip(w.tensors_mut()) {
            *t = ck.get(&format!("{prefix}.{name}"))?.clone();
        }
        Ok(w)
    }
}

impl BoundFusion {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.wq_c, self.wk_c, self.wv_c, self.wq_s, self.wk_s, self.wv_s,
            self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]
    }

    /// Fuse image patch features [N,d] with instruction token features
    /// [M,d]: softmax((F_img Wq)(F_ins Wk)^T / sqrt(d)) (F_ins Wv).
    /// PAD instruction tokens contribute zero attention weight.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        f_img: Var,
        f_ins: Var,
        pad_mask: &[bool],
    ) -> Result<Var> {
        if pad_mask.len() != tape.value(f_ins).rows() {
            return Err(Error::Dim("cross_attend: pad mask / F_ins row mismatch".into()));
        }
        if pad_mask.iter().all(|&b| b) {
            return Err(Error::Contract("cross_attend: all-PAD instruction".into()));
        }
        let q = tape.matmul(f_img, self.wq_c)?;
        let k = tape.matmul(f_ins, self.wk_c)?;
        let v = tape.matmul(f_ins, self.wv_c)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let att = tape.softmax_rows_masked(scores, Some(pad_mask))?;
        tape.matmul(att, v)
    }

    /// Self-attention refinement over the fused patch features.
    pub fn self_attend(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let q = tape.matmul(f, self.wq_s)?;
        let k = tape.matmul(f, self.wk_s)?;
        let v = tape.matmul(f, self.wv_s)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let att = tape.softmax_rows(scores)?;
        tape.matmul(att, v)
    }

    /// Token-wise MLP + sigmoid: [N,d] -> per-patch probability [N,1].
    pub fn predict_region(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let h = tape.matmul(f, self.mlp_w1)?;
        let h = tape.add_row(h, self.mlp_b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, self.mlp_w2)?;
        let o = tape.add_row(o, self.mlp_b2)?;
        tape.sigmoid(o)
    }

    /// The whole soft path: cross-attend, self-attend, probability map.
    /// Returns (fused features [N,d], probabilities [N,1]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        f_img: Var,
        f_ins: Var,
        pad_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let fused = self.cross_attend(tape, f_img, f_ins, pad_mask)?;
        let refined = self.self_attend(tape, fused)?;
        let p = self.predict_region(tape, refined)?;
        Ok((fused, p))
    }
}

/// The hardened, inference-time form of a probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    /// Per-patch probabilities, length N.
    pub p_region: Vec<f64>,
    /// Patch-grid mask, sqrt(N) x sqrt(N) row-major; 1 = edit.
    pub m_region: Vec<u8>,
    pub grid: usize,
    /// Pixel mask after nearest-neighbor upsampling by `patch`.
    pub pixel_mask: Vec<u8>,
    pub side: usize,
    pub threshold: f64,
}

/// Threshold (inclusive >=) and reshape a probability map of N = g*g
/// patches into the patch grid and a pixel mask upsampled by `patch`.
pub fn harden(p_region: &[f64], threshold: f64, patch: usize) -> Result<RegionPrediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "harden: threshold {threshold} outside [0, 1]"
        )));
    }
    let n = p_region.len();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Contract(format!(
            "harden: {n} patches do not form a square grid"
        )));
    }
    let m_region: Vec<u8> = p_region
        .iter()
        .map(|&p| if p >= threshold { 1 } else { 0 })
        .collect();
    let side = grid * patch;
    let mut pixel_mask = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            pixel_mask[y * side + x] = m_region[(y / patch) * grid + (x / patch)];
        }
    }
    Ok(RegionPrediction {
        p_region: p_region.to_vec(),
        m_region,
        grid,
        pixel_mask,
        side,
        threshold,
    })
}

impl RegionPrediction {
    /// Pixel mask as a rank-2 [side, side] tensor for latent-space blending.
    pub fn pixel_mask_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.side, self.side],
            self.pixel_mask.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask buffer matches side*side")
    }

    pub fn mask_area_fraction(&self) -> f64 {
        self.m_region.iter().map(|&b| b as f64).sum::<f64>() / self.m_region.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_error};

    fn weights(d: usize, seed: u64) -> FusionWeights {
        let mut r = rng::seeded(seed);
        FusionWeights::init(&mut r, d)
    }

    #[test]
    fn cross_attention_single_real_key_copies_its_value() {
        let d = 4;
        let w = weights(d, 1);
        let mut r = rng::seeded(2);
        let f_img = rng::normal_tensor(&mut r, vec![3, d]);
        let f_ins = rng::normal_tensor(&mut r, vec![5, d]);
        // Only token 2 is real.
        let pad = [true, true, false, true, true];
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false);
        let fi = tape.leaf(f_img, false);
        let fs = tape.leaf(f_ins.clone(), false);
        let out = b.cross_attend(&mut tape, fi, fs, &pad).unwrap();
        // Expected: every output row equals row 2 of F_ins * Wv.
        let mut tape2 = Tape::new();
        let b2 = w.bind(&mut tape2, false);
        let fs2 = tape2.leaf(f_ins, false);
        let v = tape2.matmul(fs2, b2.wv_c).unwrap();
        let vrow = &tape2.value(v).data()[2 * d..3 * d];
        for row in 0..3 {
            for j in 0..d {
                let got = tape.value(out).data()[row * d + j];
                assert!((got - vrow[j]).abs() < 1e-12, "row {row} col {j}");
            }
        }
    }

    #[test]
    fn all_pad_instruction_is_a_contract_error() {
        let d = 4;
        let w = weights(d, 3);
        let mut r = rng::seeded(4);
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false);
        let fi = tape.leaf(rng::normal_tensor(&mut r, vec![2, d]), false);
        let fs = tape.leaf(rng::normal_tensor(&mut r, vec![3, d]), false);
        assert!(matches!(
            b.cross_attend(&mut tape, fi, fs, &[true, true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn permuting_real_instruction_tokens_leaves_output_unchanged() {
        let d = 5;
        let w = weights(d, 5);
        let mut r = rng::seeded(6);
        let f_img = rng::normal_tensor(&mut r, vec![4, d]);
        let f_ins = rng::normal_tensor(&mut r, vec![4, d]);
        let pad = [false, false, false, true];
        let run = |ins: &Tensor| {
            let mut tape = Tape::new();
            let b = w.bind(&mut tape, false);
            let fi = tape.leaf(f_img.clone(), false);
            let fs = tape.leaf(ins.clone(), false);
            let o = b.cross_attend(&mut tape, fi, fs, &pad).unwrap();
            tape.value(o).clone()
        };
        let base = run(&f_ins);
        // Swap real rows 0 and 2.
        let mut swapped = f_ins.data().to_vec();
        for j in 0..d {
            swapped.swap(j, 2 * d + j);
        }
        let out = run(&Tensor::new(vec![4, d], swapped).unwrap());
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_identical_rows_give_identical_outputs() {
        let d = 4;
        let w = weights(d, 7);
        let mut r = rng::seeded(8);
        let row = rng::normal_tensor(&mut r, vec![1, d]);
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(row.data());
        }
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false);
        let f = tape.leaf(Tensor::new(vec![3, d], data).unwrap(), false);
        let o = b.self_attend(&mut tape, f).unwrap();
        let out = tape.value(o);
        for i in 1..3 {
            for j in 0..d {
                assert!((out.data()[j] - out.data()[i * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_region_outputs_open_unit_interval_and_is_tokenwise() {
        let d = 6;
        let w = weights(d, 9);
        let mut r = rng::seeded(10);
        let f = rng::normal_tensor(&mut r, vec![7, d]);
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let b = w.bind(&mut tape, false);
            let x = tape.leaf(t.clone(), false);
            let p = b.predict_region(&mut tape, x).unwrap();
            tape.value(p).data().to_vec()
        };
        let p = run(&f);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        // Row permutation permutes outputs identically (token-wise map).
        let mut rev = Vec::new();
        for i in (0..7).rev() {
            rev.extend_from_slice(&f.data()[i * d..(i + 1) * d]);
        }
        let p_rev = run(&Tensor::new(vec![7, d], rev).unwrap());
        for i in 0..7 {
            assert!((p[i] - p_rev[6 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_mlp_final_layer_predicts_half_everywhere() {
        let d = 4;
        let mut w = weights(d, 11);
        // Zero the last linear layer; sigmoid(0) = 0.5.
        *w.tensors_mut()[8] = Tensor::zeros(vec![2 * d, 1]);
        *w.tensors_mut()[9] = Tensor::zeros(vec![1]);
        let mut r = rng::seeded(12);
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false);
        let f = tape.leaf(rng::normal_tensor(&mut r, vec![5, d]), false);
        let p = b.predict_region(&mut tape, f).unwrap();
        for &v in tape.value(p).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn harden_threshold_rules_and_upsampling() {
        let p = [0.5, 0.49, 0.9, 0.1];
        let h = harden(&p, 0.5, 2).unwrap();
        assert_eq!(h.m_region, vec![1, 0, 1, 0]); // >= is inclusive
        assert_eq!(h.grid, 2);
        assert_eq!(h.side, 4);
        // Each patch becomes a 2x2 pixel block.
        assert_eq!(h.pixel_mask[0], 1);
        assert_eq!(h.pixel_mask[1], 1);
        assert_eq!(h.pixel_mask[2], 0);
        assert_eq!(h.pixel_mask[4 + 1], 1);
        assert_eq!(h.pixel_mask[2 * 4], 1);
        assert_eq!(h.pixel_mask[2 * 4 + 2], 0);
        assert!((h.mask_area_fraction() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn harden_is_monotone_in_threshold_and_rejects_bad_shapes() {
        let mut r = rng::seeded(13);
        let p: Vec<f64> = (0..16).map(|_| {
            use rand::Rng;
            r.gen::<f64>()
        }).collect();
        let lo = harden(&p, 0.3, 4).unwrap();
        let hi = harden(&p, 0.7, 4).unwrap();
        for (a, b) in hi.m_region.iter().zip(&lo.m_region) {
            assert!(a <= b, "higher threshold must shrink the mask");
        }
        assert!(harden(&p[..15], 0.5, 4).is_err());
        assert!(harden(&p, 1.5, 4).is_err());
    }

    #[test]
    fn full_region_path_gradient_matches_finite_differences() {
        let d = 4;
        let w = weights(d, 14);
        let mut r = rng::seeded(15);
        let f_img = rng::normal_tensor(&mut r, vec![4, d]);
        let f_ins = rng::normal_tensor(&mut r, vec![3, d]);
        let dir = rng::normal_tensor(&mut r, vec![4, 1]);
        let pad = [false, false, true];

        let flat: Vec<f64> = w.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |p: &[f64]| {
            let mut q = w.clone();
            let mut off = 0;
            for t in q.tensors_mut() {
                let n = t.numel();
                *t = Tensor::new(t.shape().to_vec(), p[off..off + n].to_vec()).unwrap();
                off += n;
            }
            let mut tape = Tape::new();
            let b = q.bind(&mut tape, false);
            let fi = tape.leaf(f_img.clone(), false);
            let fs = tape.leaf(f_ins.clone(), false);
            let (_, prob) = b.forward(&mut tape, fi, fs, &pad).unwrap();
            let wv = tape.leaf(dir.clone(), false);
            let m = tape.mul(prob, wv).unwrap();
            let s = tape.sum(m).unwrap();
            tape.value(s).item()
        };
        let numeric = finite_diff(eval, &flat, 1e-5);

        let mut tape = Tape::new();
        let b = w.bind(&mut tape, true);
        let fi = tape.leaf(f_img, false);
        let fs = tape.leaf(f_ins, false);
        let (_, prob) = b.forward(&mut tape, fi, fs, &pad).unwrap();
        let wv = tape.leaf(dir, false);
        let m = tape.mul(prob, wv).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        let analytic: Vec<f64> = b
            .vars()
            .iter()
            .flat_map(|&v| tape.grad(v).unwrap().data().to_vec())
            .collect();
        assert!(
            max_rel_error(&analytic, &numeric) < 1e-4,
            "rel err {}",
            max_rel_error(&analytic, &numeric)
        );
    }

    #[test]
    fn fusion_weights_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion.rged");
        let w = weights(8, 16);
        let mut ck = Checkpoint::new();
        w.save_into("fusion", &mut ck).unwrap();
        ck.save(&path).unwrap();
        let w2 = FusionWeights::load_from("fusion", &Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(w, w2);
    }
}
