//! Hybrid attention: cross-modal attention over mask-filtered features that
//! degrades to single-modality self-attention wherever the other modality is
//! blacked out.
//!
//! Features are (batch, channels, height, width). Spatial positions are
//! flattened row-major into N = H·W tokens of dimension C. Per modality m:
//!
//!   x_m = mask_m ⊗ F_m
//!   Q_m = x_m W_Q_mᵀ,  K_m = x_m W_K_mᵀ,  V_m = x_m W_V_mᵀ   (token rows)
//!   Q_c = Q_rgb + Q_thermal
//!   A_m = softmax_rows(Q_c K_mᵀ / √C)
//!   f'_m = x_m + A_m V_m
//!
//! Projections are bias-free so fully masked positions contribute exactly zero
//! keys and values, which is what makes the degradation to self-attention an
//! exact identity rather than an approximation.

use crate::error::{Error, Result};
use crate::mask::{apply_mask, ModalityMask};
use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Row block size for the attention kernel. Bounds live logit memory to
/// ROW_BLOCK·N doubles; every caller uses the same kernel so blocked and
/// cached paths are bitwise identical.
const ROW_BLOCK: usize = 256;

/// Six bias-free 1×1 projection matrices, three per modality, each C×C.
#[derive(Debug, Clone)]
pub struct HaParams {
    pub wq_rgb: Array2<f64>,
    pub wk_rgb: Array2<f64>,
    pub wv_rgb: Array2<f64>,
    pub wq_thermal: Array2<f64>,
    pub wk_thermal: Array2<f64>,
    pub wv_thermal: Array2<f64>,
}

impl HaParams {
    pub fn init(channels: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = || {
            Array2::from_shape_fn((channels, channels), |_| {
                sample_normal(rng) * std
            })
        };
        Self {
            wq_rgb: mat(),
            wk_rgb: mat(),
            wv_rgb: mat(),
            wq_thermal: mat(),
            wk_thermal: mat(),
            wv_thermal: mat(),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, w) in self.named() {
            if w.dim() != (channels, channels) {
                return Err(Error::validation(format!(
                    "{name} must be {channels}x{channels}, got {:?}",
                    w.dim()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Array2<f64>); 6] {
        [
            ("wq_rgb", &self.wq_rgb),
            ("wk_rgb", &self.wk_rgb),
            ("wv_rgb", &self.wv_rgb),
            ("wq_thermal", &self.wq_thermal),
            ("wk_thermal", &self.wk_thermal),
            ("wv_thermal", &self.wv_thermal),
        ]
    }
}

/// Box–Muller standard normal draw; two uniforms per sample, deterministic.
pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn check_finite(name: &str, t: &Array4<f64>) -> Result<()> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Applies one bias-free 1×1 projection: out[b,:,y,x] = W · f[b,:,y,x].
fn project(f: &Array4<f64>, w: &Array2<f64>) -> Result<Array4<f64>> {
    let (b, c, h, w_sp) = f.dim();
    if w.ncols() != c {
        return Err(Error::validation(format!(
            "projection expects {} input channels, feature map has {c}",
            w.ncols()
        )));
    }
    let c_out = w.nrows();
    let mut out = Array4::zeros((b, c_out, h, w_sp));
    for bi in 0..b {
        let x = f
            .slice(s![bi, .., .., ..])
            .into_shape_with_order((c, h * w_sp))
            .expect("contiguous feature map");
        let y = w.dot(&x);
        out.slice_mut(s![bi, .., .., ..])
            .assign(&y.into_shape_with_order((c_out, h, w_sp)).expect("shape"));
    }
    Ok(out)
}

/// Projects one modality's features to queries, keys and values.
pub fn project_qkv(
    f: &Array4<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    Ok((project(f, w_q)?, project(f, w_k)?, project(f, w_v)?))
}

/// Elementwise sum of the two modality-specific query maps.
pub fn combined_query(q_rgb: &Array4<f64>, q_thermal: &Array4<f64>) -> Result<Array4<f64>> {
    if q_rgb.dim() != q_thermal.dim() {
        return Err(Error::validation(format!(
            "query shapes differ: {:?} vs {:?}",
            q_rgb.dim(),
            q_thermal.dim()
        )));
    }
    Ok(q_rgb + q_thermal)
}

/// Row-blocked scaled-dot-product attention over token matrices (N×C rows).
/// Writes softmax rows into `capture` when provided (training cache); the
/// arithmetic is identical either way.
fn attend_tokens(
    q_c: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    mut capture: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let (n, c) = q_c.dim();
    let inv_sqrt_c = 1.0 / (c as f64).sqrt();
    let mut out = Array2::zeros((n, c));
    let mut row = 0;
    while row < n {
        let end = (row + ROW_BLOCK).min(n);
        let mut logits = q_c.slice(s![row..end, ..]).dot(&k.t());
        for mut l in logits.rows_mut() {
            let mut max = f64::NEG_INFINITY;
            for x in l.iter_mut() {
                *x *= inv_sqrt_c;
                max = max.max(*x);
            }
            let mut sum = 0.0;
            for x in l.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in l.iter_mut() {
                *x /= sum;
            }
        }
        if let Some(a) = capture.as_deref_mut() {
            a.slice_mut(s![row..end, ..]).assign(&logits);
        }
        out.slice_mut(s![row..end, ..]).assign(&logits.dot(v));
        row = end;
    }
    out
}

/// Views one batch item of a (B,C,H,W) map as an N×C token matrix (row-major
/// position order). The transpose is lazy; matmuls accept the view.
fn tokens(t: &Array4<f64>, b: usize) -> ArrayView2<'_, f64> {
    let (_, c, h, w) = t.dim();
    t.slice(s![b, .., .., ..])
        .into_shape_with_order((c, h * w))
        .expect("contiguous feature map")
        .reversed_axes()
}

/// Repacks an N×C token matrix into a (C,H,W) map (inverse of `tokens`).
/// Copies, because the transpose is not standard layout.
fn untokens(o: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    o.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches map size")
}

/// Full attention: softmax over keys of Q_cᵀK/√C applied to V, per batch item.
pub fn attend(q_c: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>) -> Result<Array4<f64>> {
    if q_c.dim() != k.dim() || k.dim() != v.dim() {
        return Err(Error::validation(format!(
            "attend expects equal shapes, got {:?}, {:?}, {:?}",
            q_c.dim(),
            k.dim(),
            v.dim()
        )));
    }
    check_finite("queries", q_c)?;
    check_finite("keys", k)?;
    check_finite("values", v)?;
    let (b, c, h, w) = q_c.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        let o = attend_tokens(&tokens(q_c, bi), &tokens(k, bi), &tokens(v, bi), None);
        out.slice_mut(s![bi, .., .., ..])
            .assign(&untokens(&o, c, h, w));
    }
    Ok(out)
}

fn validate_pair(
    f_rgb: &Array4<f64>,
    f_thermal: &Array4<f64>,
    m_rgb: &[ModalityMask],
    m_thermal: &[ModalityMask],
) -> Result<()> {
    if f_rgb.dim() != f_thermal.dim() {
        return Err(Error::validation(format!(
            "modality feature shapes differ: {:?} vs {:?}",
            f_rgb.dim(),
            f_thermal.dim()
        )));
    }
    check_finite("rgb features", f_rgb)?;
    check_finite("thermal features", f_thermal)?;
    let b = f_rgb.dim().0;
    if m_rgb.len() != b || m_thermal.len() != b {
        return Err(Error::validation("one mask per modality per batch item"));
    }
    Ok(())
}

struct HaForward {
    x_rgb: Array4<f64>,
    x_thermal: Array4<f64>,
    k_rgb: Array4<f64>,
    v_rgb: Array4<f64>,
    k_thermal: Array4<f64>,
    v_thermal: Array4<f64>,
    q_c: Array4<f64>,
}

fn ha_project(
    f_rgb: &Array4<f64>,
    f_thermal: &Array4<f64>,
    m_rgb: &[ModalityMask],
    m_thermal: &[ModalityMask],
    params: &HaParams,
) -> Result<HaForward> {
    validate_pair(f_rgb, f_thermal, m_rgb, m_thermal)?;
    params.validate(f_rgb.dim().1)?;
    let x_rgb = apply_mask(f_rgb, m_rgb)?;
    let x_thermal = apply_mask(f_thermal, m_thermal)?;
    let (q_rgb, k_rgb, v_rgb) = project_qkv(&x_rgb, &params.wq_rgb, &params.wk_rgb, &params.wv_rgb)?;
    let (q_thermal, k_thermal, v_thermal) = project_qkv(
        &x_thermal,
        &params.wq_thermal,
        &params.wk_thermal,
        &params.wv_thermal,
    )?;
    let q_c = combined_query(&q_rgb, &q_thermal)?;
    Ok(HaForward {
        x_rgb,
        x_thermal,
        k_rgb,
        v_rgb,
        k_thermal,
        v_thermal,
        q_c,
    })
}

/// Forward pass: returns the enhanced features (f'_rgb, f'_thermal).
pub fn hybrid_attention(
    f_rgb: &Array4<f64>,
    f_thermal: &Array4<f64>,
    m_rgb: &[ModalityMask],
    m_thermal: &[ModalityMask],
    params: &HaParams,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let fwd = ha_project(f_rgb, f_thermal, m_rgb, m_thermal, params)?;
    let star_rgb = attend(&fwd.q_c, &fwd.k_rgb, &fwd.v_rgb)?;
    let star_thermal = attend(&fwd.q_c, &fwd.k_thermal, &fwd.v_thermal)?;
    Ok((&fwd.x_rgb + &star_rgb, &fwd.x_thermal + &star_thermal))
}

/// Everything the backward pass needs from a training forward.
pub struct HaCache {
    x_rgb: Array4<f64>,
    x_thermal: Array4<f64>,
    k_rgb: Array4<f64>,
    v_rgb: Array4<f64>,
    k_thermal: Array4<f64>,
    v_thermal: Array4<f64>,
    q_c: Array4<f64>,
    a_rgb: Vec<Array2<f64>>,
    a_thermal: Vec<Array2<f64>>,
    m_rgb: Vec<ModalityMask>,
    m_thermal: Vec<ModalityMask>,
}

/// Gradients for the six projection matrices.
#[derive(Debug)]
pub struct HaGrads {
    pub dwq_rgb: Array2<f64>,
    pub dwk_rgb: Array2<f64>,
    pub dwv_rgb: Array2<f64>,
    pub dwq_thermal: Array2<f64>,
    pub dwk_thermal: Array2<f64>,
    pub dwv_thermal: Array2<f64>,
}

/// Training forward: same math as [`hybrid_attention`], additionally caching
/// attention matrices and masked inputs for the backward pass.
pub fn hybrid_attention_train(
    f_rgb: &Array4<f64>,
    f_thermal: &Array4<f64>,
    m_rgb: &[ModalityMask],
    m_thermal: &[ModalityMask],
    params: &HaParams,
) -> Result<((Array4<f64>, Array4<f64>), HaCache)> {
    let fwd = ha_project(f_rgb, f_thermal, m_rgb, m_thermal, params)?;
    let (b, c, h, w) = fwd.q_c.dim();
    let n = h * w;
    let mut out_rgb = Array4::zeros((b, c, h, w));
    let mut out_thermal = Array4::zeros((b, c, h, w));
    let mut a_rgb = Vec::with_capacity(b);
    let mut a_thermal = Vec::with_capacity(b);
    for bi in 0..b {
        let q = tokens(&fwd.q_c, bi);
        let mut a = Array2::zeros((n, n));
        let o = attend_tokens(&q, &tokens(&fwd.k_rgb, bi), &tokens(&fwd.v_rgb, bi), Some(&mut a));
        out_rgb
            .slice_mut(s![bi, .., .., ..])
            .assign(&untokens(&o, c, h, w));
        a_rgb.push(a);
        let mut a = Array2::zeros((n, n));
        let o = attend_tokens(
            &q,
            &tokens(&fwd.k_thermal, bi),
            &tokens(&fwd.v_thermal, bi),
            Some(&mut a),
        );
        out_thermal
            .slice_mut(s![bi, .., .., ..])
            .assign(&untokens(&o, c, h, w));
        a_thermal.push(a);
    }
    out_rgb += &fwd.x_rgb;
    out_thermal += &fwd.x_thermal;
    let cache = HaCache {
        x_rgb: fwd.x_rgb,
        x_thermal: fwd.x_thermal,
        k_rgb: fwd.k_rgb,
        v_rgb: fwd.v_rgb,
        k_thermal: fwd.k_thermal,
        v_thermal: fwd.v_thermal,
        q_c: fwd.q_c,
        a_rgb,
        a_thermal,
        m_rgb: m_rgb.to_vec(),
        m_thermal: m_thermal.to_vec(),
    };
    Ok(((out_rgb, out_thermal), cache))
}

/// Softmax backward per row: dL = A ⊙ (dA − rowsum(dA ⊙ A)).
fn softmax_backward(a: &Array2<f64>, d_a: &Array2<f64>) -> Array2<f64> {
    let mut out = d_a * a;
    for (mut row, a_row) in out.rows_mut().into_iter().zip(a.rows()) {
        let dot: f64 = row.sum();
        row.zip_mut_with(&a_row, |r, &av| *r -= dot * av);
    }
    out
}

/// Backward pass. `d_rgb`/`d_thermal` are loss gradients of the enhanced
/// outputs; returns gradients of the unmasked input features plus parameter
/// gradients.
pub fn hybrid_attention_backward(
    cache: &HaCache,
    params: &HaParams,
    d_rgb: &Array4<f64>,
    d_thermal: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, HaGrads) {
    let (b, c, _, _) = cache.q_c.dim();
    let inv_sqrt_c = 1.0 / (c as f64).sqrt();
    let mut dx_rgb = d_rgb.clone(); // residual term
    let mut dx_thermal = d_thermal.clone();
    let zero = || Array2::<f64>::zeros((c, c));
    let mut grads = HaGrads {
        dwq_rgb: zero(),
        dwk_rgb: zero(),
        dwv_rgb: zero(),
        dwq_thermal: zero(),
        dwk_thermal: zero(),
        dwv_thermal: zero(),
    };
    for bi in 0..b {
        let q_c = tokens(&cache.q_c, bi).to_owned();
        let mut d_qc = Array2::<f64>::zeros(q_c.dim());
        // Per modality: dV = AᵀG, dA = GVᵀ, dL = softmax', dQc += dL·K/√C,
        // dK = dLᵀ·Qc/√C; then back through the bias-free projections.
        let back_modality = |g_out: &Array4<f64>,
                                 a: &Array2<f64>,
                                 k: &Array4<f64>,
                                 v: &Array4<f64>,
                                 x: &Array4<f64>,
                                 w_k: &Array2<f64>,
                                 w_v: &Array2<f64>,
                                 dw_k: &mut Array2<f64>,
                                 dw_v: &mut Array2<f64>,
                                 dx: &mut Array4<f64>,
                                 d_qc: &mut Array2<f64>| {
            let g = tokens(g_out, bi).to_owned();
            let k_t = tokens(k, bi).to_owned();
            let v_t = tokens(v, bi).to_owned();
            let x_t = tokens(x, bi).to_owned();
            let d_v = a.t().dot(&g);
            let d_a = g.dot(&v_t.t());
            let d_l = softmax_backward(a, &d_a);
            d_qc.scaled_add(inv_sqrt_c, &d_l.dot(&k_t));
            let d_k = d_l.t().dot(&q_c) * inv_sqrt_c;
            *dw_k += &d_k.t().dot(&x_t);
            *dw_v += &d_v.t().dot(&x_t);
            let d_x_tok = d_k.dot(w_k) + d_v.dot(w_v);
            add_tokens(dx, bi, &d_x_tok);
        };
        back_modality(
            d_rgb,
            &cache.a_rgb[bi],
            &cache.k_rgb,
            &cache.v_rgb,
            &cache.x_rgb,
            &params.wk_rgb,
            &params.wv_rgb,
            &mut grads.dwk_rgb,
            &mut grads.dwv_rgb,
            &mut dx_rgb,
            &mut d_qc,
        );
        back_modality(
            d_thermal,
            &cache.a_thermal[bi],
            &cache.k_thermal,
            &cache.v_thermal,
            &cache.x_thermal,
            &params.wk_thermal,
            &params.wv_thermal,
            &mut grads.dwk_thermal,
            &mut grads.dwv_thermal,
            &mut dx_thermal,
            &mut d_qc,
        );
        // Q_c feeds both modality queries.
        let x_rgb_t = tokens(&cache.x_rgb, bi).to_owned();
        let x_th_t = tokens(&cache.x_thermal, bi).to_owned();
        grads.dwq_rgb += &d_qc.t().dot(&x_rgb_t);
        grads.dwq_thermal += &d_qc.t().dot(&x_th_t);
        add_tokens(&mut dx_rgb, bi, &d_qc.dot(&params.wq_rgb));
        add_tokens(&mut dx_thermal, bi, &d_qc.dot(&params.wq_thermal));
    }
    // x = mask ⊗ F, so input gradients vanish at masked positions.
    zero_masked(&mut dx_rgb, &cache.m_rgb);
    zero_masked(&mut dx_thermal, &cache.m_thermal);
    (dx_rgb, dx_thermal, grads)
}

/// Adds an N×C token-gradient matrix into batch item `bi` of a (B,C,H,W) map.
fn add_tokens(dst: &mut Array4<f64>, bi: usize, tok: &Array2<f64>) {
    let (_, c, h, w) = dst.dim();
    let n = h * w;
    let mut view = dst.slice_mut(s![bi, .., .., ..]);
    let flat = view.as_slice_mut().expect("contiguous gradient map");
    for ci in 0..c {
        for p in 0..n {
            flat[ci * n + p] += tok[[p, ci]];
        }
    }
}

fn zero_masked(d: &mut Array4<f64>, masks: &[ModalityMask]) {
    for (bi, m) in masks.iter().enumerate() {
        for mut plane in d.index_axis_mut(ndarray::Axis(0), bi).outer_iter_mut() {
            plane.indexed_iter_mut().for_each(|((y, x), v)| {
                if m.get(y, x) == 0 {
                    *v = 0.0;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn attend_rejects_shape_mismatch() {
        let q = Array4::zeros((1, 2, 2, 2));
        let k = Array4::zeros((1, 2, 2, 3));
        assert!(attend(&q, &k, &k).is_err());
    }

    #[test]
    fn attend_rejects_non_finite() {
        let mut q = Array4::zeros((1, 1, 1, 2));
        q[[0, 0, 0, 1]] = f64::NAN;
        let k = Array4::zeros((1, 1, 1, 2));
        assert!(attend(&q, &k, &k).is_err());
    }

    #[test]
    fn projection_matches_hand_product() {
        // f(x) = (1,2) through W_Q = [[0,1],[1,0]] gives Q(x) = (2,1).
        let mut f = Array4::zeros((1, 2, 1, 1));
        f[[0, 0, 0, 0]] = 1.0;
        f[[0, 1, 0, 0]] = 2.0;
        let w = array![[0.0, 1.0], [1.0, 0.0]];
        let q = project(&f, &w).unwrap();
        assert_eq!(q[[0, 0, 0, 0]], 2.0);
        assert_eq!(q[[0, 1, 0, 0]], 1.0);
    }
}
