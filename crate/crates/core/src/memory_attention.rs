//! Key-value memory attention and the pairwise-cosine correlation penalty.
//!
//! `attn(Q, K, V) = [sim(Q, K) · V W_V] W_O` where `sim` is a row softmax of
//! projected query/key scores scaled by `1/sqrt(h)`.

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamGroup, ParamStore};

/// Scoring rule applied between projected queries and keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    /// Scaled inner product.
    #[default]
    Dot,
    /// Negative squared Euclidean distance, scaled the same way.
    NegL2,
}

/// `W_Q: [d_q, h]`, `W_K: [d_k, h]`.
#[derive(Debug, Clone)]
pub struct KeyProjection {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub sim_kind: SimKind,
}

impl KeyProjection {
    pub fn new(w_q: Tensor, w_k: Tensor, sim_kind: SimKind) -> Result<Self> {
        let (_, hq) = w_q.dims2()?;
        let (_, hk) = w_k.dims2()?;
        if hq != hk || hq == 0 {
            return Err(Error::argument(format!(
                "query/key projections disagree on hidden size ({hq} vs {hk})"
            )));
        }
        Ok(Self { w_q, w_k, sim_kind })
    }

    pub fn hidden(&self) -> usize {
        self.w_q.dims()[1]
    }

    pub fn d_q(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn d_k(&self) -> usize {
        self.w_k.dims()[0]
    }
}

/// Full projection set for dense-valued memories.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub key: KeyProjection,
    /// `[d_v, h_out]`
    pub w_v: Tensor,
    /// `[h_out, d_out]`
    pub w_o: Tensor,
}

impl AttentionParams {
    pub fn new(key: KeyProjection, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let (_, h_out) = w_v.dims2()?;
        let (h_in, _) = w_o.dims2()?;
        if h_out != h_in {
            return Err(Error::argument(format!(
                "value projection width {h_out} does not feed output projection ({h_in})"
            )));
        }
        Ok(Self { key, w_v, w_o })
    }

    /// Register `W_Q, W_K, W_V, W_O` under `name` in a parameter store.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        sim_kind: SimKind,
    ) -> Result<Self> {
        let AttentionDims { d_q, d_k, d_v, hidden, h_out, d_out } = dims;
        let w_q = store.normal(&format!("{name}.w_q"), &[d_q, hidden], (1.0 / d_q as f64).sqrt(), ParamGroup::Model)?;
        let w_k = store.normal(&format!("{name}.w_k"), &[d_k, hidden], (1.0 / d_k as f64).sqrt(), ParamGroup::Model)?;
        let w_v = store.normal(&format!("{name}.w_v"), &[d_v, h_out], (1.0 / d_v as f64).sqrt(), ParamGroup::Model)?;
        let w_o = store.normal(&format!("{name}.w_o"), &[h_out, d_out], (1.0 / h_out as f64).sqrt(), ParamGroup::Model)?;
        Self::new(KeyProjection::new(w_q, w_k, sim_kind)?, w_v, w_o)
    }

    pub fn d_v(&self) -> usize {
        self.w_v.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w_o.dims()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub hidden: usize,
    pub h_out: usize,
    pub d_out: usize,
}

/// Trainable key/value slots `[M, D]`.
#[derive(Debug, Clone)]
pub struct ImplicitMemoryBank {
    pub keys: Tensor,
    pub values: Tensor,
}

pub const IMPLICIT_INIT_STD: f64 = 0.02;

impl ImplicitMemoryBank {
    /// Register keys and values in the memory group, drawn from a normal
    /// distribution seeded independently of the rest of the model.
    pub fn register(store: &mut ParamStore, name: &str, m: usize, d: usize, std: f64, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::argument("memory bank needs M >= 1 and D >= 1"));
        }
        let (k, v) = Self::sample(m, d, std, seed);
        let dtype = store.dtype();
        let keys = store.normal(&format!("{name}.keys"), &[m, d], 0.0, ParamGroup::Memory)?;
        let values = store.normal(&format!("{name}.values"), &[m, d], 0.0, ParamGroup::Memory)?;
        store.var(&format!("{name}.keys"))?.set(&nn::tensor_from_f64(k, &[m, d], dtype)?)?;
        store.var(&format!("{name}.values"))?.set(&nn::tensor_from_f64(v, &[m, d], dtype)?)?;
        Ok(Self { keys, values })
    }

    /// Host-side draw of `(keys, values)` from the init distribution.
    pub fn sample(m: usize, d: usize, std: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = nn::seeded_normal(&mut rng, m * d, std);
        let v = nn::seeded_normal(&mut rng, m * d, std);
        (k, v)
    }

    pub fn m(&self) -> usize {
        self.keys.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.keys.dims()[1]
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = nn::scalar_f64(&t.sum_all()?)?;
    if !s.is_finite() {
        return Err(Error::numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// Unnormalized scores `[T, M]`.
pub fn similarity_logits(q: &Tensor, k: &Tensor, proj: &KeyProjection) -> Result<Tensor> {
    let (_, dq) = q.dims2().map_err(|_| Error::argument(format!("query must be 2-D, got {:?}", q.dims())))?;
    let (_, dk) = k.dims2().map_err(|_| Error::argument(format!("keys must be 2-D, got {:?}", k.dims())))?;
    if dq != proj.d_q() || dk != proj.d_k() {
        return Err(Error::argument(format!(
            "query/key widths ({dq}, {dk}) do not match projections ({}, {})",
            proj.d_q(),
            proj.d_k()
        )));
    }
    let scale = 1.0 / (proj.hidden() as f64).sqrt();
    let qp = q.matmul(&proj.w_q)?;
    let kp = k.matmul(&proj.w_k)?;
    let dot = qp.matmul(&kp.t()?)?;
    let logits = match proj.sim_kind {
        SimKind::Dot => (dot * scale)?,
        SimKind::NegL2 => {
            let qn = qp.sqr()?.sum_keepdim(1)?;
            let kn = kp.sqr()?.sum_keepdim(1)?.t()?;
            let dist = (dot * -2.0)?.broadcast_add(&qn)?.broadcast_add(&kn)?;
            (dist * -scale)?
        }
    };
    Ok(logits)
}

/// Row-stochastic attention weights `[T, M]`.
pub fn similarity(q: &Tensor, k: &Tensor, proj: &KeyProjection) -> Result<Tensor> {
    let logits = similarity_logits(q, k, proj)?;
    check_finite(&logits, "similarity logits")?;
    nn::softmax_last(&logits)
}

/// Attention readout and the weights that produced it: `([T, d_out], [T, M])`.
pub fn attend_with_weights(
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let (m, dv) = values.dims2()?;
    if m != keys.dims()[0] {
        return Err(Error::argument(format!(
            "{} keys but {m} values",
            keys.dims()[0]
        )));
    }
    if dv != params.d_v() {
        return Err(Error::argument(format!(
            "value width {dv} does not match W_V input {}",
            params.d_v()
        )));
    }
    let w = similarity(q, keys, &params.key)?;
    let projected = values.matmul(&params.w_v)?;
    let out = w.matmul(&projected)?.matmul(&params.w_o)?;
    Ok((out, w))
}

pub fn attend(q: &Tensor, keys: &Tensor, values: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    Ok(attend_with_weights(q, keys, values, params)?.0)
}

/// `Σ_i Σ_{j≠i} cos(X_i, X_j)` computed as `‖Σ x̂_i‖² − Σ ‖x̂_i‖²`.
pub fn pairwise_cosine_corr(x: &Tensor) -> Result<Tensor> {
    let (m, _) = x.dims2()?;
    if m < 2 {
        return Err(Error::argument("pairwise correlation needs at least two rows"));
    }
    let norms = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    for (i, n) in nn::to_f64_vec(&norms)?.into_iter().enumerate() {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::numeric(format!("row {i} has zero or non-finite norm")));
        }
    }
    let unit = x.broadcast_div(&norms)?;
    let total = unit.sum_keepdim(0)?.sqr()?.sum_all()?;
    let diag = unit.sqr()?.sum_all()?;
    Ok((total - diag)?)
}

/// Mean absolute off-diagonal cosine among rows; a diagnostics helper that
/// stays on the host.
pub fn mean_abs_cosine(x: &Tensor) -> Result<f64> {
    let (m, d) = x.dims2()?;
    let v = nn::to_f64_vec(x)?;
    let rows: Vec<&[f64]> = v.chunks(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                acc += (dot / (norms[i] * norms[j])).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Identity matrix helper used when a projection should be transparent.
pub fn identity(n: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    nn::tensor_from_f64(v, &[n, n], dtype)
}

/// Sum of each similarity row; used by call sites asserting row-stochasticity.
pub fn row_sums(weights: &Tensor) -> Result<Vec<f64>> {
    nn::to_f64_vec(&weights.sum_keepdim(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEVICE;
    use proptest::prelude::*;

    fn t(v: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &DEVICE).unwrap()
    }

    fn eye_proj(n: usize, kind: SimKind) -> KeyProjection {
        KeyProjection::new(identity(n, DType::F64).unwrap(), identity(n, DType::F64).unwrap(), kind).unwrap()
    }

    #[test]
    fn singleton_memory_gets_full_weight() {
        let q = t(vec![0.3, -1.0, 2.0, 0.5], (2, 2));
        let k = t(vec![5.0, 1.0], (1, 2));
        let w = similarity(&q, &k, &eye_proj(2, SimKind::Dot)).unwrap();
        assert_eq!(nn::to_f64_vec(&w).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn closed_form_quarter_three_quarters() {
        let q = t(vec![1.0], (1, 1));
        let k = t(vec![0.0, 3f64.ln()], (2, 1));
        let w = nn::to_f64_vec(&similarity(&q, &k, &eye_proj(1, SimKind::Dot)).unwrap()).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);

        let params = AttentionParams::new(eye_proj(1, SimKind::Dot), identity(1, DType::F64).unwrap(), identity(1, DType::F64).unwrap()).unwrap();
        let v = t(vec![1.0, 5.0], (2, 1));
        let out = nn::to_f64_vec(&attend(&q, &k, &v, &params).unwrap()).unwrap();
        assert!((out[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_query_is_uniform() {
        let q = t(vec![0.0; 3], (1, 3));
        let k = t((0..12).map(|i| i as f64 * 0.7 - 3.0).collect(), (4, 3));
        let w = nn::to_f64_vec(&similarity(&q, &k, &eye_proj(3, SimKind::Dot)).unwrap()).unwrap();
        for x in w {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_value_passthrough() {
        let params = AttentionParams::new(eye_proj(2, SimKind::Dot), identity(2, DType::F64).unwrap(), identity(2, DType::F64).unwrap()).unwrap();
        let q = t(vec![1.0, 2.0, -3.0, 0.1, 0.0, 9.0], (3, 2));
        let k = t(vec![0.5, 0.5], (1, 2));
        let v = t(vec![7.0, -2.0], (1, 2));
        let out = nn::to_f64_vec(&attend(&q, &k, &v, &params).unwrap()).unwrap();
        assert_eq!(out, vec![7.0, -2.0, 7.0, -2.0, 7.0, -2.0]);
    }

    #[test]
    fn symmetric_values_cancel() {
        let params = AttentionParams::new(eye_proj(2, SimKind::Dot), identity(2, DType::F64).unwrap(), identity(2, DType::F64).unwrap()).unwrap();
        let q = t(vec![0.4, -1.3], (1, 2));
        let k = t(vec![1.0, 1.0, 1.0, 1.0], (2, 2));
        let v = t(vec![2.0, -3.0, -2.0, 3.0], (2, 2));
        let out = nn::to_f64_vec(&attend(&q, &k, &v, &params).unwrap()).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let q = t(vec![1.0, 2.0], (1, 2));
        let k = t(vec![1.0, 2.0, 3.0], (1, 3));
        assert!(matches!(similarity(&q, &k, &eye_proj(2, SimKind::Dot)), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_logits_rejected() {
        let q = t(vec![f64::INFINITY], (1, 1));
        let k = t(vec![1.0, -1.0], (2, 1));
        assert!(matches!(similarity(&q, &k, &eye_proj(1, SimKind::Dot)), Err(Error::Numeric(_))));
    }

    #[test]
    fn corr_examples() {
        let c = |v: Vec<f64>| nn::scalar_f64(&pairwise_cosine_corr(&t(v, (2, 2))).unwrap()).unwrap();
        assert!(c(vec![1.0, 0.0, 0.0, 1.0]).abs() < 1e-15);
        assert!((c(vec![1.0, 2.0, 1.0, 2.0]) - 2.0).abs() < 1e-12);
        assert!((c(vec![1.0, 0.0, 1.0, 1.0]) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn corr_zero_row_named() {
        let err = pairwise_cosine_corr(&t(vec![1.0, 0.0, 0.0, 0.0, 2.0, 1.0], (3, 2))).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("row 1")),
            other => panic!("{other:?}"),
        }
        assert!(pairwise_cosine_corr(&t(vec![1.0, 0.0], (1, 2))).is_err());
    }

    #[test]
    fn neg_l2_exact_match_dominates() {
        let proj = eye_proj(3, SimKind::NegL2);
        let k = t(vec![0.0, 1.0, 2.0, 5.0, -1.0, 0.5, 0.3, 0.3, 0.3], (3, 3));
        let q = t(vec![5.0, -1.0, 0.5], (1, 3));
        let w = nn::to_f64_vec(&similarity(&q, &k, &proj).unwrap()).unwrap();
        assert!(w[1] >= w[0] && w[1] >= w[2]);
    }

    fn brute_corr(rows: &[Vec<f64>]) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut s = 0.0;
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i != j {
                    s += cos(&rows[i], &rows[j]);
                }
            }
        }
        s
    }

    proptest! {
        #[test]
        fn corr_matches_pairwise_loop_and_is_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 2..6),
            signs in prop::collection::vec(any::<bool>(), 18),
            scales in prop::collection::vec(0.1f64..10.0, 6),
        ) {
            let rows: Vec<Vec<f64>> = rows.iter().enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, &x)| if signs[i * 3 + j] { x } else { -x }).collect())
                .collect();
            let m = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let got = nn::scalar_f64(&pairwise_cosine_corr(&t(flat, (m, 3))).unwrap()).unwrap();
            prop_assert!((got - brute_corr(&rows)).abs() < 1e-10);

            let scaled: Vec<f64> = rows.iter().enumerate().flat_map(|(i, r)| { let s = scales[i]; r.iter().map(move |&x| x * s) }).collect();
            let got2 = nn::scalar_f64(&pairwise_cosine_corr(&t(scaled, (m, 3))).unwrap()).unwrap();
            prop_assert!((got - got2).abs() < 1e-10);
        }

        #[test]
        fn rows_are_stochastic(t_rows in 1usize..6, m in 1usize..6, seed in 0u64..1000, neg in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = t(nn::seeded_normal(&mut rng, t_rows * 3, 2.0), (t_rows, 3));
            let k = t(nn::seeded_normal(&mut rng, m * 3, 2.0), (m, 3));
            let kind = if neg { SimKind::NegL2 } else { SimKind::Dot };
            let proj = KeyProjection::new(
                t(nn::seeded_normal(&mut rng, 3 * 4, 1.0), (3, 4)),
                t(nn::seeded_normal(&mut rng, 3 * 4, 1.0), (3, 4)),
                kind,
            ).unwrap();
            let w = similarity(&q, &k, &proj).unwrap();
            for s in row_sums(&w).unwrap() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            for x in nn::to_f64_vec(&w).unwrap() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn softmax_shift_invariance_exact(z in prop::collection::vec(-64i32..64, 1..8), c in -16i32..16) {
            // dyadic values keep z + c exact in binary floating point
            let zs: Vec<f64> = z.iter().map(|&v| v as f64 / 8.0).collect();
            let shifted: Vec<f64> = zs.iter().map(|&v| v + c as f64).collect();
            let n = zs.len();
            let a = nn::to_f64_vec(&nn::softmax_last(&t(zs, (1, n))).unwrap()).unwrap();
            let b = nn::to_f64_vec(&nn::softmax_last(&t(shifted, (1, n))).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
