//! Correlation-modulated multi-view attention and camera-conditioned
//! cross-attention, with hand-written reverse-mode gradients.
//!
//! Multi-view features are stored stacked: view `i` owns rows
//! `i·n .. (i+1)·n` of a single `(m·n) × channels` matrix. The key/value
//! sequence of the multi-view layer is `[views ⊕ garment_front ⊕ garment_back]`.
//! For a query token of view `i`, the logit against a key token of view `j`
//! is multiplied by `C[i][j]` before the softmax; logits against garment
//! tokens keep weight 1.

use crate::camera::{CameraToken, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place, Mat};

/// Token features of one view, `[token, channel]`.
pub type FeatureTensor = Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFeatures {
    views: usize,
    stacked: Mat,
}

impl MultiViewFeatures {
    pub fn from_views(views: &[FeatureTensor]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Empty("multi-view features need at least one view".into()))?;
        if views.iter().any(|v| v.shape() != first.shape()) {
            return Err(Error::Dimension("views differ in shape".into()));
        }
        let refs: Vec<&Mat> = views.iter().collect();
        Ok(Self {
            views: views.len(),
            stacked: Mat::vstack(&refs)?,
        })
    }

    pub fn from_stacked(views: usize, stacked: Mat) -> Result<Self> {
        if views == 0 || stacked.rows() % views != 0 {
            return Err(Error::Dimension(format!(
                "{} rows cannot be split into {views} views",
                stacked.rows()
            )));
        }
        Ok(Self { views, stacked })
    }

    pub fn view_count(&self) -> usize {
        self.views
    }

    pub fn tokens_per_view(&self) -> usize {
        self.stacked.rows() / self.views
    }

    pub fn channels(&self) -> usize {
        self.stacked.cols()
    }

    pub fn stacked(&self) -> &Mat {
        &self.stacked
    }

    pub fn into_stacked(self) -> Mat {
        self.stacked
    }

    pub fn view(&self, i: usize) -> FeatureTensor {
        let n = self.tokens_per_view();
        self.stacked
            .slice_rows(i * n, n)
            .expect("view index within range")
    }

    pub fn to_views(&self) -> Vec<FeatureTensor> {
        (0..self.views).map(|i| self.view(i)).collect()
    }
}

/// Single-head projections: `w_q: in×d`, `w_k: kv_in×d`, `w_v: kv_in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

impl AttentionParams {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    fn validate(&self, q_in: usize, kv_in: usize) -> Result<()> {
        if self.w_q.rows() != q_in
            || self.w_k.rows() != kv_in
            || self.w_v.rows() != kv_in
            || self.w_k.cols() != self.w_q.cols()
            || self.w_q.cols() == 0
        {
            return Err(Error::Dimension(format!(
                "attention params W_Q {:?}, W_K {:?}, W_V {:?} for query width {q_in}, key width {kv_in}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    queries_in: Mat,
    keys_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    /// Per-(query, key) logit multiplier; `None` means all ones.
    weights: Option<Mat>,
    scale: f64,
}

impl AttentionCache {
    pub fn probabilities(&self) -> &Mat {
        &self.probs
    }
}

fn attention_forward(
    queries_in: &Mat,
    keys_in: &Mat,
    params: &AttentionParams,
    weights: Option<Mat>,
) -> Result<(Mat, AttentionCache)> {
    params.validate(queries_in.cols(), keys_in.cols())?;
    if keys_in.rows() == 0 {
        return Err(Error::Dimension("attention over an empty key sequence".into()));
    }
    let q = queries_in.matmul(&params.w_q)?;
    let k = keys_in.matmul(&params.w_k)?;
    let v = keys_in.matmul(&params.w_v)?;
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let mut probs = Mat::zeros(q.rows(), k.rows());
    for a in 0..q.rows() {
        let qa = q.row(a);
        let row = probs.row_mut(a);
        match &weights {
            None => {
                for (b, s) in row.iter_mut().enumerate() {
                    *s = dot(qa, k.row(b)) * scale;
                }
            }
            Some(w) => {
                let wa = w.row(a);
                for (b, s) in row.iter_mut().enumerate() {
                    *s = (wa[b] * dot(qa, k.row(b))) * scale;
                }
            }
        }
        softmax_in_place(row);
    }
    let out = probs.matmul(&v)?;
    Ok((
        out,
        AttentionCache {
            queries_in: queries_in.clone(),
            keys_in: keys_in.clone(),
            q,
            k,
            v,
            probs,
            weights,
            scale,
        },
    ))
}

/// Returns `(d_queries_in, d_keys_in, param grads)`.
fn attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    upstream: &Mat,
) -> Result<(Mat, Mat, AttentionGrads)> {
    if upstream.shape() != (cache.q.rows(), cache.v.cols()) {
        return Err(Error::Dimension(format!(
            "upstream gradient {:?}, expected {:?}",
            upstream.shape(),
            (cache.q.rows(), cache.v.cols())
        )));
    }
    let probs = &cache.probs;
    let d_v = probs.t_matmul(upstream)?;
    let d_p = upstream.matmul_t(&cache.v)?;
    let mut d_raw = Mat::zeros(probs.rows(), probs.cols());
    for a in 0..probs.rows() {
        let p = probs.row(a);
        let dp = d_p.row(a);
        let inner = dot(p, dp);
        let out = d_raw.row_mut(a);
        match &cache.weights {
            None => {
                for b in 0..p.len() {
                    out[b] = p[b] * (dp[b] - inner) * cache.scale;
                }
            }
            Some(w) => {
                let wa = w.row(a);
                for b in 0..p.len() {
                    out[b] = p[b] * (dp[b] - inner) * wa[b] * cache.scale;
                }
            }
        }
    }
    let d_q = d_raw.matmul(&cache.k)?;
    let d_k = d_raw.t_matmul(&cache.q)?;
    let grads = AttentionGrads {
        w_q: cache.queries_in.t_matmul(&d_q)?,
        w_k: cache.keys_in.t_matmul(&d_k)?,
        w_v: cache.keys_in.t_matmul(&d_v)?,
    };
    let d_queries = d_q.matmul_t(&params.w_q)?;
    let mut d_keys = d_k.matmul_t(&params.w_k)?;
    d_keys.add_assign(&d_v.matmul_t(&params.w_v)?)?;
    Ok((d_queries, d_keys, grads))
}

/// Plain scaled dot-product attention: queries from `queries_in`, keys and
/// values from `keys_in`.
pub fn scaled_dot_attention(queries_in: &Mat, keys_in: &Mat, params: &AttentionParams) -> Result<Mat> {
    Ok(attention_forward(queries_in, keys_in, params, None)?.0)
}

fn check_garment(features: &MultiViewFeatures, g: &FeatureTensor, name: &str) -> Result<()> {
    if g.rows() > 0 && g.cols() != features.channels() {
        return Err(Error::Dimension(format!(
            "{name} has {} channels, features have {}",
            g.cols(),
            features.channels()
        )));
    }
    Ok(())
}

fn check_correlation(c: &CorrelationMatrix, views: usize) -> Result<()> {
    if c.size() != views {
        return Err(Error::InvalidCorrelation(format!(
            "{0}x{0} matrix for {views} views",
            c.size()
        )));
    }
    for i in 0..views {
        if c.get(i, i) != 1.0 {
            return Err(Error::InvalidCorrelation(format!("diagonal entry {i} is not 1")));
        }
        for j in 0..views {
            let v = c.get(i, j);
            if !(0.0..=1.0).contains(&v) || v != c.get(j, i) {
                return Err(Error::InvalidCorrelation(format!("entry ({i},{j}) = {v}")));
            }
        }
    }
    Ok(())
}

/// Logit multipliers: view-view blocks take `C[i][j]`, garment columns 1.
fn modulation_weights(c: &CorrelationMatrix, views: usize, tokens: usize, garment_tokens: usize) -> Mat {
    let view_keys = views * tokens;
    Mat::from_fn(view_keys, view_keys + garment_tokens, |a, b| {
        if b < view_keys {
            c.get(a / tokens, b / tokens)
        } else {
            1.0
        }
    })
}

fn key_sequence(
    features: &MultiViewFeatures,
    garment_front: &FeatureTensor,
    garment_back: &FeatureTensor,
) -> Result<Mat> {
    let mut parts = vec![features.stacked()];
    if garment_front.rows() > 0 {
        parts.push(garment_front);
    }
    if garment_back.rows() > 0 {
        parts.push(garment_back);
    }
    Mat::vstack(&parts)
}

pub fn mv_attention_forward(
    features: &MultiViewFeatures,
    garment_front: &FeatureTensor,
    garment_back: &FeatureTensor,
    correlation: &CorrelationMatrix,
    params: &AttentionParams,
) -> Result<(MultiViewFeatures, AttentionCache)> {
    check_garment(features, garment_front, "front garment features")?;
    check_garment(features, garment_back, "back garment features")?;
    check_correlation(correlation, features.view_count())?;
    if params.w_v.cols() != features.channels() {
        return Err(Error::Dimension(format!(
            "W_V produces {} channels, features have {}",
            params.w_v.cols(),
            features.channels()
        )));
    }
    let keys = key_sequence(features, garment_front, garment_back)?;
    let weights = modulation_weights(
        correlation,
        features.view_count(),
        features.tokens_per_view(),
        garment_front.rows() + garment_back.rows(),
    );
    let (out, cache) = attention_forward(features.stacked(), &keys, params, Some(weights))?;
    Ok((MultiViewFeatures::from_stacked(features.view_count(), out)?, cache))
}

/// Multi-view spatial attention with correlation-modulated logits.
pub fn mv_attention(
    features: &MultiViewFeatures,
    garment_front: &FeatureTensor,
    garment_back: &FeatureTensor,
    correlation: &CorrelationMatrix,
    params: &AttentionParams,
) -> Result<MultiViewFeatures> {
    Ok(mv_attention_forward(features, garment_front, garment_back, correlation, params)?.0)
}

/// Pre-softmax logits of [`mv_attention`], rows = view tokens, columns = keys.
pub fn mv_attention_logits(
    features: &MultiViewFeatures,
    garment_front: &FeatureTensor,
    garment_back: &FeatureTensor,
    correlation: &CorrelationMatrix,
    params: &AttentionParams,
) -> Result<Mat> {
    check_correlation(correlation, features.view_count())?;
    params.validate(features.channels(), features.channels())?;
    let keys = key_sequence(features, garment_front, garment_back)?;
    let q = features.stacked().matmul(&params.w_q)?;
    let k = keys.matmul(&params.w_k)?;
    let w = modulation_weights(
        correlation,
        features.view_count(),
        features.tokens_per_view(),
        garment_front.rows() + garment_back.rows(),
    );
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    Ok(Mat::from_fn(q.rows(), k.rows(), |a, b| {
        (w.get(a, b) * dot(q.row(a), k.row(b))) * scale
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvAttentionGrads {
    pub features: MultiViewFeatures,
    pub garment_front: FeatureTensor,
    pub garment_back: FeatureTensor,
    pub params: AttentionGrads,
}

pub fn mv_attention_backward(
    cache: &AttentionCache,
    views: usize,
    garment_front_tokens: usize,
    garment_back_tokens: usize,
    params: &AttentionParams,
    upstream: &MultiViewFeatures,
) -> Result<MvAttentionGrads> {
    let (mut d_queries, d_keys, grads) = attention_backward(cache, params, upstream.stacked())?;
    let view_rows = d_queries.rows();
    d_queries.add_assign(&d_keys.slice_rows(0, view_rows)?)?;
    let channels = d_keys.cols();
    let garment_front = if garment_front_tokens > 0 {
        d_keys.slice_rows(view_rows, garment_front_tokens)?
    } else {
        Mat::zeros(0, channels)
    };
    let garment_back = if garment_back_tokens > 0 {
        d_keys.slice_rows(view_rows + garment_front_tokens, garment_back_tokens)?
    } else {
        Mat::zeros(0, channels)
    };
    Ok(MvAttentionGrads {
        features: MultiViewFeatures::from_stacked(views, d_queries)?,
        garment_front,
        garment_back,
        params: grads,
    })
}

/// Gradients of `⟨upstream, mv_attention(...)⟩` with respect to the
/// features, both garment feature sets and the three projections. The
/// correlation matrix is a constant.
pub fn mv_attention_grad(
    features: &MultiViewFeatures,
    garment_front: &FeatureTensor,
    garment_back: &FeatureTensor,
    correlation: &CorrelationMatrix,
    params: &AttentionParams,
    upstream: &MultiViewFeatures,
) -> Result<MvAttentionGrads> {
    let (_, cache) = mv_attention_forward(features, garment_front, garment_back, correlation, params)?;
    mv_attention_backward(
        &cache,
        features.view_count(),
        garment_front.rows(),
        garment_back.rows(),
        params,
        upstream,
    )
}

/// Condition tokens `Y = garment_embed ⊕ MLP(camera_token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    tokens: Mat,
}

impl ConditionTokens {
    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }
}

/// `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = Mat::from_vec(1, x.len(), x.to_vec())?;
        let hidden = input.matmul(&self.w1)?.add_row(&self.b1)?.map(f64::tanh);
        Ok(hidden.matmul(&self.w2)?.add_row(&self.b2)?.into_vec())
    }
}

pub fn build_condition_tokens(
    garment_embed: &FeatureTensor,
    camera_token: &CameraToken,
    mlp: &MlpParams,
) -> Result<ConditionTokens> {
    if mlp.output_width() != garment_embed.cols() {
        return Err(Error::Dimension(format!(
            "MLP emits {} channels, garment embedding has {}",
            mlp.output_width(),
            garment_embed.cols()
        )));
    }
    let cam = Mat::from_vec(1, mlp.output_width(), mlp.forward(camera_token.values())?)?;
    Ok(ConditionTokens {
        tokens: Mat::vstack(&[garment_embed, &cam])?,
    })
}

pub fn cross_attention_forward(
    hidden: &FeatureTensor,
    condition: &ConditionTokens,
    params: &AttentionParams,
) -> Result<(FeatureTensor, AttentionCache)> {
    attention_forward(hidden, condition.tokens(), params, None)
}

/// Standard attention with queries from `hidden` and keys/values from `Y`.
pub fn cross_attention(
    hidden: &FeatureTensor,
    condition: &ConditionTokens,
    params: &AttentionParams,
) -> Result<FeatureTensor> {
    Ok(cross_attention_forward(hidden, condition, params)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionGrads {
    pub hidden: FeatureTensor,
    pub condition: Mat,
    pub params: AttentionGrads,
}

pub fn cross_attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    upstream: &FeatureTensor,
) -> Result<CrossAttentionGrads> {
    let (hidden, condition, params) = attention_backward(cache, params, upstream)?;
    Ok(CrossAttentionGrads {
        hidden,
        condition,
        params,
    })
}

pub fn cross_attention_grad(
    hidden: &FeatureTensor,
    condition: &ConditionTokens,
    params: &AttentionParams,
    upstream: &FeatureTensor,
) -> Result<CrossAttentionGrads> {
    let (_, cache) = cross_attention_forward(hidden, condition, params)?;
    cross_attention_backward(&cache, params, upstream)
}

impl ConditionTokens {
    /// Wraps precomputed tokens (used by the denoiser, which builds `Y` on its tape).
    pub fn from_tokens(tokens: Mat) -> Self {
        Self { tokens }
    }
}
