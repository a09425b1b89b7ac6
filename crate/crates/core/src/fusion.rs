//! Sentence-level co-attention between sentence states and patch states.
//!
//! Each sentence attends over patches and each patch attends over sentences.
//! The attended context is added back to the side it is indexed by, so
//! `h_cls_fused[i] = h_cls[i] + c_b[i]` and `c_fused[k] = c[k] + h_r[k]`.

use rand::Rng;

use crate::encoders::{FusionConfig, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Optional learned projections applied before the co-attention dot product.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub sentence: Linear,
    pub patch: Linear,
}

impl FusionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            sentence: Linear::new(store, "fusion.sentence", d, d, std, rng)?,
            patch: Linear::new(store, "fusion.patch", d, d, std, rng)?,
        })
    }
}

/// Co-attention results as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub a_b: Var,
    pub c_b: Var,
    pub a_r: Var,
    pub h_r: Var,
    pub h_cls_fused: Var,
    pub c_fused: Var,
}

/// Co-attention results as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `M × P`, sentence over patches.
    pub a_b: Tensor,
    pub c_b: Tensor,
    /// `P × M`, patch over sentences.
    pub a_r: Tensor,
    pub h_r: Tensor,
    pub h_cls_fused: Tensor,
    pub c_fused: Tensor,
}

/// Records co-attention on the tape. `params` must be present when
/// `config.projected` is set.
pub fn co_attend_on(
    tape: &mut Tape,
    store: &ParamStore,
    params: Option<&FusionParams>,
    config: FusionConfig,
    h_cls: Var,
    c: Var,
) -> Result<FusionVars> {
    let (hs, cs) = (tape.shape(h_cls).to_vec(), tape.shape(c).to_vec());
    if hs.len() != 2 || cs.len() != 2 {
        return Err(Error::Shape(format!("co-attention expects matrices, got {hs:?} and {cs:?}")));
    }
    if hs[1] != cs[1] {
        return Err(Error::Shape(format!("sentence width {} vs patch width {}", hs[1], cs[1])));
    }
    if hs[0] == 0 || cs[0] == 0 {
        return Err(Error::Empty("co-attention needs at least one sentence and one patch".into()));
    }
    let (qs, qp) = if config.projected {
        let p = params.ok_or_else(|| Error::Config("fusion.projected set without fusion parameters".into()))?;
        (p.sentence.forward(tape, store, h_cls)?, p.patch.forward(tape, store, c)?)
    } else {
        (h_cls, c)
    };
    let mut logits = tape.matmul_nt(qs, qp)?;
    if config.scaled {
        logits = tape.scale(logits, 1.0 / (hs[1] as f64).sqrt());
    }
    let logits_r = tape.transpose(logits)?;
    let a_b = tape.softmax(logits);
    let c_b = tape.matmul(a_b, c)?;
    let a_r = tape.softmax(logits_r);
    let h_r = tape.matmul(a_r, h_cls)?;
    let h_cls_fused = tape.add(h_cls, c_b)?;
    let c_fused = tape.add(c, h_r)?;
    Ok(FusionVars {
        a_b,
        c_b,
        a_r,
        h_r,
        h_cls_fused,
        c_fused,
    })
}

/// Parameter-free co-attention on values.
pub fn co_attend(h_cls: &Tensor, c: &Tensor) -> Result<FusionOutput> {
    co_attend_with(h_cls, c, FusionConfig::default())
}

/// [`co_attend`] with the scaling flag honoured. Projection needs parameters
/// and is only available through [`co_attend_on`].
pub fn co_attend_with(h_cls: &Tensor, c: &Tensor, config: FusionConfig) -> Result<FusionOutput> {
    if config.projected {
        return Err(Error::Config("projected co-attention needs parameters".into()));
    }
    let mut tape = Tape::new();
    let store = ParamStore::new();
    let h = tape.constant(h_cls.clone());
    let cv = tape.constant(c.clone());
    let v = co_attend_on(&mut tape, &store, None, config, h, cv)?;
    let get = |x: Var| tape.value(x).clone();
    Ok(FusionOutput {
        a_b: get(v.a_b),
        c_b: get(v.c_b),
        a_r: get(v.a_r),
        h_r: get(v.h_r),
        h_cls_fused: get(v.h_cls_fused),
        c_fused: get(v.c_fused),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn singleton_attention() {
        let h = m(&[&[0.5, -1.0]]);
        let c = m(&[&[2.0, 3.0]]);
        let out = co_attend(&h, &c).unwrap();
        assert_eq!(out.a_b.data(), &[1.0]);
        assert_eq!(out.c_b, c);
        assert_eq!(out.h_cls_fused.data(), &[2.5, 2.0]);
        assert_eq!(out.c_fused.data(), &[2.5, 2.0]);
    }

    #[test]
    fn zero_logits_give_uniform_rows() {
        let h = m(&[&[1.0, 0.0, 0.0]]);
        let c = m(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 2.0], &[0.0, -3.0, 1.0]]);
        let out = co_attend(&h, &c).unwrap();
        for &w in out.a_b.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let mean = [0.0, -2.0 / 3.0, 1.0];
        for (a, b) in out.c_b.data().iter().zip(mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let err = co_attend(&m(&[&[1.0, 2.0]]), &m(&[&[1.0, 2.0, 3.0]])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn patch_permutation_is_tracked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let perm = [2, 0, 1];
        let cp = Tensor::from_rows(&perm.iter().map(|&i| c.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = co_attend(&h, &c).unwrap();
        let b = co_attend(&h, &cp).unwrap();
        assert!(a.c_b.max_abs_diff(&b.c_b) < 1e-12);
        assert!(a.h_cls_fused.max_abs_diff(&b.h_cls_fused) < 1e-12);
        for r in 0..2 {
            for (k, &src) in perm.iter().enumerate() {
                assert!((b.a_b.at(r, k) - a.a_b.at(r, src)).abs() < 1e-14);
            }
        }
        for (k, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((b.c_fused.at(k, j) - a.c_fused.at(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logit_scale_sharpens_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let hb = Tensor::new(&[3, 5], h.data().iter().map(|v| v * 50.0).collect()).unwrap();
        let out = co_attend(&hb, &c).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..4)
                .map(|k| h.row(i).iter().zip(c.row(k)).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..4).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            assert!(out.a_b.at(i, best) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn scaled_flag_divides_logits() {
        let h = m(&[&[2.0, 0.0, 0.0, 0.0]]);
        let c = m(&[&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]]);
        let cfg = FusionConfig {
            scaled: true,
            ..FusionConfig::default()
        };
        let out = co_attend_with(&h, &c, cfg).unwrap();
        // logits (2, 0) / sqrt(4) = (1, 0)
        let e = std::f64::consts::E;
        assert!((out.a_b.at(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[2, 3], 0.7, &mut rng);
        let c = Tensor::randn(&[3, 3], 0.7, &mut rng);
        let w1 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w2 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let store = ParamStore::new();
                let f = co_attend_on(t, &store, None, FusionConfig::default(), v[0], v[1])?;
                let a = t.constant(w1.clone());
                let b = t.constant(w2.clone());
                let x = t.mul(f.h_cls_fused, a)?;
                let y = t.mul(f.c_fused, b)?;
                let sx = t.sum(x);
                let sy = t.sum(y);
                t.add(sx, sy)
            },
            &[h, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn shapes() -> impl Strategy<Value = (usize, usize, usize, u64)> {
        (1usize..6, 1usize..7, 1usize..6, any::<u64>())
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_contexts_are_convex((mm, p, d, seed) in shapes()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Tensor::randn(&[mm, d], 1.0, &mut rng);
            let c = Tensor::randn(&[p, d], 1.0, &mut rng);
            let out = co_attend(&h, &c).unwrap();
            for r in 0..mm {
                let s: f64 = out.a_b.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for r in 0..p {
                let s: f64 = out.a_r.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for j in 0..d {
                let (lo, hi) = (0..p).map(|k| c.at(k, j)).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
                for r in 0..mm {
                    prop_assert!(out.c_b.at(r, j) >= lo - 1e-12 && out.c_b.at(r, j) <= hi + 1e-12);
                }
                let (lo, hi) = (0..mm).map(|k| h.at(k, j)).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
                for r in 0..p {
                    prop_assert!(out.h_r.at(r, j) >= lo - 1e-12 && out.h_r.at(r, j) <= hi + 1e-12);
                }
            }
            prop_assert_eq!(out.h_cls_fused.shape(), h.shape());
            prop_assert_eq!(out.c_fused.shape(), c.shape());
        }
    }
}
