//! Training objectives: the cross-modal hinge, reconstruction, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{CladError, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Scalar values of the three objectives for one batch (or a mean over batches).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub batch_size: usize,
}

/// `‖a − b‖²` for two equally shaped vectors.
pub fn squared_distance<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Margin hinge over `N × d` visual and textual batches.
///
/// Positives are aligned rows; negatives pair visual row `i` with every
/// textual row `j ≠ i`. Both sums are divided by `N`.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    zv_batch: Var,
    zt_batch: Var,
    alpha_margin: f64,
    beta_margin: f64,
) -> Result<Var> {
    let (sv, st) = (tape.value(zv_batch).shape().to_vec(), tape.value(zt_batch).shape().to_vec());
    if sv.len() != 2 {
        return Err(CladError::dim("contrastive_loss", "visual batch rank", 2, sv.len()));
    }
    if st.len() != 2 {
        return Err(CladError::dim("contrastive_loss", "textual batch rank", 2, st.len()));
    }
    if sv[0] != st[0] {
        return Err(CladError::dim("contrastive_loss", "batch size N", sv[0], st[0]));
    }
    if sv[1] != st[1] {
        return Err(CladError::dim("contrastive_loss", "embedding dim", sv[1], st[1]));
    }
    if alpha_margin < 0.0 || beta_margin <= 0.0 {
        return Err(CladError::usage("contrastive margins need alpha >= 0 and beta > 0"));
    }
    let n = sv[0];
    let visual: Vec<Var> = (0..n).map(|i| tape.row(zv_batch, i)).collect::<Result<_>>()?;
    let textual: Vec<Var> = (0..n).map(|j| tape.row(zt_batch, j)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(n * n);
    for (i, &v) in visual.iter().enumerate() {
        for (j, &t) in textual.iter().enumerate() {
            let dist = squared_distance(tape, v, t)?;
            let hinge_in = if i == j {
                tape.offset(dist, -alpha_margin)?
            } else {
                let neg = tape.scale(dist, -1.0)?;
                tape.offset(neg, beta_margin)?
            };
            terms.push(tape.relu(hinge_in)?);
        }
    }
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Summed squared error of the image and bag-of-words reconstructions.
pub fn reconstruction_loss<S: Scalar>(
    tape: &mut Tape<S>,
    image: Var,
    image_recon: Var,
    bow_target: Var,
    bow_recon: Var,
) -> Result<Var> {
    let image_term = squared_distance(tape, image_recon, image)?;
    let text_term = squared_distance(tape, bow_recon, bow_target)?;
    tape.add(image_term, text_term)
}

/// `contrastive + lambda · reconstruction`.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, contrastive: Var, reconstruction: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CladError::usage("lambda must be non-negative"));
    }
    let weighted = tape.scale(reconstruction, lambda)?;
    tape.add(contrastive, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Tensor};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn contrastive_value(zv: &[Vec<f64>], zt: &[Vec<f64>], alpha: f64, beta: f64) -> f64 {
        let mut t = Tape::<f64>::new();
        let (v, tt) = (batch(&mut t, zv), batch(&mut t, zt));
        let l = contrastive_loss(&mut t, v, tt, alpha, beta).unwrap();
        t.value(l).item().unwrap()
    }

    fn batch(t: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        t.param(Tensor::new(vec![rows.len(), d], flat).unwrap())
    }

    #[test]
    fn hand_values() {
        let z = vec![vec![0.0, 0.0]];
        assert_eq!(contrastive_value(&z, &z, 0.2, 1.0), 0.0);
        let r = contrastive_value(&[vec![1.0, 0.0]], &z, 0.2, 1.0);
        assert!((r - 0.8).abs() < 1e-12);
        let pairs = vec![vec![0.0, 0.0], vec![0.5, 0.0]];
        let r = contrastive_value(&pairs, &pairs, 0.2, 1.0);
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn batch_size_mismatch_is_a_dimension_error() {
        let mut t = Tape::<f64>::new();
        let v = batch(&mut t, &[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let tt = batch(&mut t, &[vec![0.0, 0.0]]);
        let err = contrastive_loss(&mut t, v, tt, 0.2, 1.0).unwrap_err();
        assert!(matches!(err, CladError::Dimension { .. }));
        assert!(err.to_string().contains("batch size"));
    }

    #[test]
    fn hinge_at_margin_contributes_nothing() {
        // positive distance² exactly alpha, negative distance² exactly beta
        let zv = vec![vec![0.5, 0.0], vec![10.0, 0.0]];
        let zt = vec![vec![0.0, 0.0], vec![10.0, 0.5]];
        let mut t = Tape::<f64>::new();
        let (v, tt) = (batch(&mut t, &zv), batch(&mut t, &zt));
        let l = contrastive_loss(&mut t, v, tt, 0.25, 1.0).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reconstruction_hand_values() {
        let mut t = Tape::<f64>::new();
        let pixels = 64;
        let img = t.leaf(Tensor::full(&[1, 8, 8], 0.4));
        let same = t.leaf(Tensor::full(&[1, 8, 8], 0.4));
        let off = t.leaf(Tensor::full(&[1, 8, 8], 0.5));
        let bow = t.leaf(Tensor::vector(vec![0.0, 1.0, 1.0]));
        let perfect = reconstruction_loss(&mut t, img, same, bow, bow).unwrap();
        assert_eq!(t.value(perfect).item().unwrap(), 0.0);
        let r = reconstruction_loss(&mut t, img, off, bow, bow).unwrap();
        assert!((t.value(r).item().unwrap() - 0.01 * pixels as f64).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_loop_oracle() {
        let mut rng = Rng::seeded(9);
        let img: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform()).collect();
        let rec: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform()).collect();
        let bow: Vec<f64> = (0..7).map(|_| rng.uniform()).collect();
        let bow_rec: Vec<f64> = (0..7).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..img.len() {
            oracle += (rec[i] - img[i]) * (rec[i] - img[i]);
        }
        for i in 0..bow.len() {
            oracle += (bow_rec[i] - bow[i]) * (bow_rec[i] - bow[i]);
        }
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(vec![3, 16, 16], img).unwrap());
        let b = t.leaf(Tensor::new(vec![3, 16, 16], rec).unwrap());
        let c = t.leaf(Tensor::vector(bow));
        let d = t.leaf(Tensor::vector(bow_rec));
        let r = reconstruction_loss(&mut t, a, b, c, d).unwrap();
        assert!((t.value(r).item().unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[1, 8, 8]));
        let b = t.leaf(Tensor::zeros(&[1, 8, 4]));
        let c = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(
            reconstruction_loss(&mut t, a, b, c, c),
            Err(CladError::Dimension { .. })
        ));
    }

    #[test]
    fn total_loss_values() {
        let mut t = Tape::<f64>::new();
        let c = t.leaf(Tensor::scalar(0.5));
        let r = t.leaf(Tensor::scalar(2.0));
        let l = total_loss(&mut t, c, r, 0.1).unwrap();
        assert!((t.value(l).item().unwrap() - 0.7).abs() < 1e-12);
        let l0 = total_loss(&mut t, c, r, 0.0).unwrap();
        assert_eq!(t.value(l0).item().unwrap(), 0.5);
        let z = t.leaf(Tensor::scalar(0.0));
        let lz = total_loss(&mut t, z, z, 3.0).unwrap();
        assert_eq!(t.value(lz).item().unwrap(), 0.0);
    }

    fn random_rows(rng: &mut Rng, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.range(-spread, spread)).collect()).collect()
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = Rng::seeded(10);
        for _ in 0..20 {
            let n = rng.between(1, 4);
            let zv = random_rows(&mut rng, n, 3, 0.8);
            let zt = random_rows(&mut rng, n, 3, 0.8);
            let mut t = Tape::<f64>::new();
            let (v, tt) = (batch(&mut t, &zv), batch(&mut t, &zt));
            let l = contrastive_loss(&mut t, v, tt, 0.2, 1.0).unwrap();
            t.backward(l).unwrap();
            let zv_t = t.value(v).clone();
            let zt_t = t.value(tt).clone();
            let f = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let mut t = Tape::<f64>::new();
                let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
                let l = contrastive_loss(&mut t, x, y, 0.2, 1.0)?;
                Ok(t.value(l).clone())
            };
            let gv = finite_diff_grad(|x| f(x, &zt_t), &zv_t, 1e-7).unwrap();
            let gt = finite_diff_grad(|y| f(&zv_t, y), &zt_t, 1e-7).unwrap();
            assert!(relative_error(t.grad(v).unwrap().data(), gv.data()) < 1e-6);
            assert!(relative_error(t.grad(tt).unwrap().data(), gt.data()) < 1e-6);
        }
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = Rng::seeded(11);
        let shapes = [vec![1, 4, 4], vec![1, 4, 4], vec![5], vec![5]];
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), (0..s.iter().product()).map(|_| rng.uniform()).collect()).unwrap())
            .collect();
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::<f64>::new();
            let v: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let l = reconstruction_loss(&mut t, v[0], v[1], v[2], v[3])?;
            Ok(t.value(l).clone())
        };
        let mut t = Tape::<f64>::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let l = reconstruction_loss(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        t.backward(l).unwrap();
        for k in 0..4 {
            let num = finite_diff_grad(
                |x| {
                    let mut ins = inputs.clone();
                    ins[k] = x.clone();
                    eval(&ins)
                },
                &inputs[k],
                1e-6,
            )
            .unwrap();
            assert!(relative_error(t.grad(v[k]).unwrap().data(), num.data()) < 1e-6);
        }
    }

    #[test]
    fn single_pair_has_no_negative_term() {
        let mut rng = Rng::seeded(12);
        for _ in 0..20 {
            let zv = random_rows(&mut rng, 1, 4, 1.0);
            let zt = random_rows(&mut rng, 1, 4, 1.0);
            let d2: f64 = zv[0].iter().zip(&zt[0]).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = contrastive_value(&zv, &zt, 0.2, 1.0);
            assert!((v - (d2 - 0.2).max(0.0)).abs() < 1e-12);
        }
    }

    /// Random orthogonal matrix from Gram-Schmidt on a random basis.
    fn random_rotation(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        q
    }

    fn rotate(q: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| q.iter().map(|qi| qi.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariant_under_joint_row_permutation(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = Rng::seeded(seed);
            let zv = random_rows(&mut rng, n, 3, 1.0);
            let zt = random_rows(&mut rng, n, 3, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let pv: Vec<_> = perm.iter().map(|&i| zv[i].clone()).collect();
            let pt: Vec<_> = perm.iter().map(|&i| zt[i].clone()).collect();
            let a = contrastive_value(&zv, &zt, 0.2, 1.0);
            let b = contrastive_value(&pv, &pt, 0.2, 1.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_shared_rotation(seed in any::<u64>(), n in 1usize..5, d in 2usize..6) {
            let mut rng = Rng::seeded(seed);
            let zv = random_rows(&mut rng, n, d, 1.0);
            let zt = random_rows(&mut rng, n, d, 1.0);
            let q = random_rotation(&mut rng, d);
            let a = contrastive_value(&zv, &zt, 0.2, 1.0);
            let b = contrastive_value(&rotate(&q, &zv), &rotate(&q, &zt), 0.2, 1.0);
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn zero_exactly_when_all_margins_hold(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = Rng::seeded(seed);
            let zv = random_rows(&mut rng, n, 2, 1.5);
            let zt = random_rows(&mut rng, n, 2, 1.5);
            let d2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
            let mut satisfied = true;
            for i in 0..n {
                for j in 0..n {
                    let d = d2(&zv[i], &zt[j]);
                    if (i == j && d > 0.2) || (i != j && d < 1.0) {
                        satisfied = false;
                    }
                }
            }
            let v = contrastive_value(&zv, &zt, 0.2, 1.0);
            prop_assert_eq!(v == 0.0, satisfied);
        }
    }
}
