//! Instance-wise, feature-wise and text-prototype contrastive losses.

use std::collections::VecDeque;

use crate::encoder::ProjectionHead;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub instance: f32,
    pub feature: f32,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            instance: 0.1,
            feature: 0.5,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.instance > 0.0 && self.feature > 0.0)
            || !self.instance.is_finite()
            || !self.feature.is_finite()
        {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// FIFO of key-encoder embeddings used as instance negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    items: VecDeque<Vec<f32>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            items: VecDeque::with_capacity(capacity),
        })
    }

    /// Enqueues every row of `[B, M]`, evicting the oldest beyond capacity.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.cols() != self.dim {
            return shape_err(format!(
                "queue holds {}-vectors, got {:?}",
                self.dim,
                batch.dims()
            ));
        }
        for r in 0..batch.rows() {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(batch.row(r).to_vec());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.items.iter().map(Vec::as_slice)
    }

    /// Contents oldest-first as `[len, M]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.items.is_empty() {
            return Err(Error::Usage("negative queue is empty".into()));
        }
        Tensor::new(
            vec![self.items.len(), self.dim],
            self.items.iter().flatten().copied().collect(),
        )
    }
}

/// Mean over rows of `−log softmax(logits)[·, 0]`; column 0 holds the
/// positive logit.
pub fn info_nce(tape: &mut Tape, logits: Var) -> Result<Var> {
    let dims = tape.value(logits).dims().to_vec();
    let [b, c] = dims[..] else {
        return shape_err("info_nce expects [B, 1+N] logits");
    };
    if c < 2 {
        return Err(Error::Usage("info_nce needs at least one negative".into()));
    }
    let lse = tape.logsumexp_rows(logits)?;
    let pos = tape.pick(logits, (0..b).map(|i| i * c).collect())?;
    let per = tape.sub(lse, pos)?;
    Ok(tape.mean(per))
}

/// InfoNCE over already-projected vectors: `q`, `k` are `[B, M]`, `neg`
/// is `[N, M]`; similarities are cosines divided by `tau`.
pub fn instance_loss_projected(tape: &mut Tape, q: Var, k: Var, neg: Var, tau: f32) -> Result<Var> {
    let qn = tape.normalize_rows(q)?;
    let kn = tape.normalize_rows(k)?;
    let nn = tape.normalize_rows(neg)?;
    let b = tape.value(qn).rows();
    let pos = tape.row_dot(qn, kn)?;
    let pos = tape.reshape(pos, &[b, 1])?;
    let nt = tape.transpose(nn)?;
    let negs = tape.matmul(qn, nt)?;
    let logits = tape.concat_cols(pos, negs)?;
    let logits = tape.scale(logits, 1.0 / tau);
    info_nce(tape, logits)
}

/// Instance-wise contrast of anchors `e` against positives `e_pos` (both
/// `[B, M]`) and the queued negatives, all passed through the projection
/// head.
pub fn instance_loss(
    tape: &mut Tape,
    e: Var,
    e_pos: Var,
    queue: &NegativeQueue,
    tau: f32,
    head: &ProjectionHead,
    head_vars: &[Var],
) -> Result<Var> {
    let negs = tape.constant(queue.to_tensor()?);
    let q = head.forward(tape, head_vars, e)?;
    let k = head.forward(tape, head_vars, e_pos)?;
    let n = head.forward(tape, head_vars, negs)?;
    instance_loss_projected(tape, q, k, n, tau)
}

/// Feature-wise contrast over the columns of three `[B, M]` matrices.
///
/// For each column `i`, the strong view's column is the anchor: it is pulled
/// toward the weak view's column `i` and contrasted against every strong
/// and negative column. Summed over columns.
pub fn feature_loss(tape: &mut Tape, weak: Var, strong: Var, neg: Var, tau: f32) -> Result<Var> {
    let b = tape.value(strong).rows();
    if tape.value(strong).rank() != 2 || b < 2 {
        return Err(Error::Usage(format!(
            "feature contrast needs a batch of at least 2, got {:?}",
            tape.value(strong).dims()
        )));
    }
    let w = tape.transpose(weak)?;
    let s = tape.transpose(strong)?;
    let n = tape.transpose(neg)?;
    let wn = tape.normalize_rows(w)?;
    let sn = tape.normalize_rows(s)?;
    let nn = tape.normalize_rows(n)?;
    let st = tape.transpose(sn)?;
    let nt = tape.transpose(nn)?;
    let ss = tape.matmul(sn, st)?;
    let sneg = tape.matmul(sn, nt)?;
    let all = tape.concat_cols(ss, sneg)?;
    let all = tape.scale(all, 1.0 / tau);
    let lse = tape.logsumexp_rows(all)?;
    let pos = tape.row_dot(sn, wn)?;
    let pos = tape.scale(pos, 1.0 / tau);
    let per = tape.sub(lse, pos)?;
    Ok(tape.sum(per))
}

/// `−mean cos(tp_k, e_b)` over prototypes and batch rows.
pub fn text_alignment(tape: &mut Tape, e: Var, tp: &Tensor) -> Result<Var> {
    check_prototypes(tape, e, tp)?;
    let en = tape.normalize_rows(e)?;
    let tpn = tape.constant(tp.clone());
    let tpn = tape.normalize_rows(tpn)?;
    let tpt = tape.transpose(tpn)?;
    let cos = tape.matmul(en, tpt)?;
    let m = tape.mean(cos);
    Ok(tape.scale(m, -1.0))
}

/// Prototype coordinates `e · tpᵀ`, `[B, M] → [B, k]`.
pub fn prototype_coords_var(tape: &mut Tape, e: Var, tp: &Tensor) -> Result<Var> {
    check_prototypes(tape, e, tp)?;
    let t = tape.constant(tp.transpose()?);
    tape.matmul(e, t)
}

fn check_prototypes(tape: &Tape, e: Var, tp: &Tensor) -> Result<()> {
    if tp.rank() != 2 || tp.rows() < 1 {
        return Err(Error::Parameter("need at least one prototype".into()));
    }
    let ed = tape.value(e).dims();
    if ed.len() != 2 || ed[1] != tp.cols() {
        return shape_err(format!(
            "embeddings {ed:?} do not match prototypes {:?}",
            tp.dims()
        ));
    }
    Ok(())
}

/// Alignment and contrast parts of the text-prototype loss.
#[derive(Clone, Copy, Debug)]
pub struct TextLoss {
    pub total: Var,
    pub align: Var,
    pub contrast: Var,
}

/// Pulls anchors toward the prototypes and runs feature contrast in
/// prototype coordinates: anchor coordinates in the strong slot, positive
/// coordinates in the weak slot, negative coordinates as negatives.
pub fn text_align_loss(
    tape: &mut Tape,
    e: Var,
    e_pos: Var,
    e_neg: Var,
    tp: &Tensor,
    tau: f32,
) -> Result<TextLoss> {
    let align = text_alignment(tape, e, tp)?;
    let ca = prototype_coords_var(tape, e, tp)?;
    let cp = prototype_coords_var(tape, e_pos, tp)?;
    let cn = prototype_coords_var(tape, e_neg, tp)?;
    let contrast = feature_loss(tape, cp, ca, cn, tau)?;
    let total = tape.add(align, contrast)?;
    Ok(TextLoss {
        total,
        align,
        contrast,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        f64::from(tape.value(v).item())
    }

    #[test]
    fn info_nce_symmetry_and_uniform() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![0.3, 0.3]]).unwrap());
        let v = info_nce(&mut tape, l).unwrap();
        assert!((scalar(&tape, v) - 2f64.ln()).abs() < 1e-6);

        let l = tape.constant(Tensor::full(&[4, 8], 1.7));
        let v = info_nce(&mut tape, l).unwrap();
        assert!((scalar(&tape, v) - 8f64.ln()).abs() < 1e-5);

        let l = tape.constant(Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap());
        let v = info_nce(&mut tape, l).unwrap();
        assert!(scalar(&tape, v) <= 1e-8);
    }

    #[test]
    fn instance_loss_on_vectors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let n = tape.constant(Tensor::from_rows(&[vec![0.0, -1.0], vec![0.0, 3.0]]).unwrap());
        let v = instance_loss_projected(&mut tape, q, k, n, 0.5).unwrap();
        assert!((scalar(&tape, v) - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn instance_loss_rejects_empty_queue() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let head = ProjectionHead::new(2, &mut r);
        let mut tape = Tape::new();
        let hv = head.store.bind(&mut tape, true);
        let e = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let q = NegativeQueue::new(4, 2).unwrap();
        assert!(matches!(
            instance_loss(&mut tape, e, e, &q, 0.1, &head, &hv),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = NegativeQueue::new(4, 1).unwrap();
        q.push(&Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        assert_eq!(q.len(), 2);
        q.push(&Tensor::from_rows(&[vec![3.0], vec![4.0], vec![5.0]]).unwrap()).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.to_tensor().unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);

        let mut q = NegativeQueue::new(3, 1).unwrap();
        for i in 0..4 {
            q.push(&Tensor::from_rows(&[vec![i as f32]]).unwrap()).unwrap();
        }
        assert_eq!(q.to_tensor().unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(q.push(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).is_err());
    }

    #[test]
    fn feature_loss_identical_single_column() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![-0.5]]).unwrap());
        let v = feature_loss(&mut tape, m, m, m, 0.5).unwrap();
        assert!((scalar(&tape, v) - 2f64.ln()).abs() < 1e-5);

        let one = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(matches!(
            feature_loss(&mut tape, one, one, one, 0.5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn alignment_examples() {
        let mut tape = Tape::new();
        let tp = Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let e = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap());
        let a = text_alignment(&mut tape, e, &tp).unwrap();
        assert!((scalar(&tape, a) + 1.0).abs() < 1e-6);

        let tp2 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let e = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
        let a = text_alignment(&mut tape, e, &tp2).unwrap();
        assert!((scalar(&tape, a) + 0.5).abs() < 1e-6);

        let e1 = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap());
        let e5 = tape.scale(e1, 5.0);
        let a1 = text_alignment(&mut tape, e1, &tp2).unwrap();
        let a5 = text_alignment(&mut tape, e5, &tp2).unwrap();
        assert!((scalar(&tape, a1) - scalar(&tape, a5)).abs() < 1e-6);

        let bad = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(text_alignment(&mut tape, e1, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn text_loss_parts_add_up() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let tp = Tensor::randn(&[3, 5], 1.0, &mut r);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut r));
        let p = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut r));
        let n = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut r));
        let t = text_align_loss(&mut tape, e, p, n, &tp, 0.5).unwrap();
        let sum = scalar(&tape, t.align) + scalar(&tape, t.contrast);
        assert!((scalar(&tape, t.total) - sum).abs() < 1e-5);
        assert!(scalar(&tape, t.contrast) > 0.0);
    }
}
