//! A small define-by-run reverse-mode tape over [`Mat`] values.
//!
//! Only the handful of operations the toy denoiser needs are supported. The
//! two attention layers are single tape nodes whose backward passes are the
//! analytic gradients from [`crate::mvattn`].

use crate::camera::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::mvattn::{
    self, AttentionCache, AttentionParams, ConditionTokens, MultiViewFeatures,
};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀ·b` with `b` a single row.
    AddRow(Var, Var),
    Tanh(Var),
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    GatherRow {
        table: Var,
        row: usize,
    },
    TileRows {
        src: Var,
        times: usize,
    },
    MvAttention {
        features: Var,
        garment_front: Option<Var>,
        garment_back: Option<Var>,
        w_q: Var,
        w_k: Var,
        w_v: Var,
        views: usize,
        cache: Box<AttentionCache>,
    },
    CrossAttention {
        hidden: Var,
        condition: Var,
        w_q: Var,
        w_k: Var,
        w_v: Var,
        cache: Box<AttentionCache>,
    },
    MeanSquaredError {
        pred: Var,
        target: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(Error::Dimension(format!("row bias of shape {:?}", b.shape())));
        }
        let v = self.value(a).add_row(b.row(0))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::hstack(&mats)?;
        Ok(self.push(v, Op::HStack(parts.to_vec())))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::vstack(&mats)?;
        Ok(self.push(v, Op::VStack(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { src, start }))
    }

    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let v = self.value(table).slice_rows(row, 1)?;
        Ok(self.push(v, Op::GatherRow { table, row }))
    }

    pub fn tile_rows(&mut self, src: Var, times: usize) -> Result<Var> {
        let s = self.value(src);
        let parts: Vec<&Mat> = std::iter::repeat_n(s, times).collect();
        let v = Mat::vstack(&parts)?;
        Ok(self.push(v, Op::TileRows { src, times }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn mv_attention(
        &mut self,
        features: Var,
        views: usize,
        garment_front: Option<Var>,
        garment_back: Option<Var>,
        correlation: &CorrelationMatrix,
        w_q: Var,
        w_k: Var,
        w_v: Var,
    ) -> Result<Var> {
        let channels = self.value(features).cols();
        let empty = Mat::zeros(0, channels);
        let feats = MultiViewFeatures::from_stacked(views, self.value(features).clone())?;
        let params = AttentionParams {
            w_q: self.value(w_q).clone(),
            w_k: self.value(w_k).clone(),
            w_v: self.value(w_v).clone(),
        };
        let gf = garment_front.map_or(&empty, |g| self.value(g));
        let gb = garment_back.map_or(&empty, |g| self.value(g));
        let (out, cache) = mvattn::mv_attention_forward(&feats, gf, gb, correlation, &params)?;
        Ok(self.push(
            out.into_stacked(),
            Op::MvAttention {
                features,
                garment_front,
                garment_back,
                w_q,
                w_k,
                w_v,
                views,
                cache: Box::new(cache),
            },
        ))
    }

    pub fn cross_attention(
        &mut self,
        hidden: Var,
        condition: Var,
        w_q: Var,
        w_k: Var,
        w_v: Var,
    ) -> Result<Var> {
        let params = AttentionParams {
            w_q: self.value(w_q).clone(),
            w_k: self.value(w_k).clone(),
            w_v: self.value(w_v).clone(),
        };
        let y = ConditionTokens::from_tokens(self.value(condition).clone());
        let (out, cache) = mvattn::cross_attention_forward(self.value(hidden), &y, &params)?;
        Ok(self.push(
            out,
            Op::CrossAttention {
                hidden,
                condition,
                w_q,
                w_k,
                w_v,
                cache: Box::new(cache),
            },
        ))
    }

    /// Mean of `(pred − target)²` over all entries, as a 1×1 value.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Result<Var> {
        let p = self.value(pred);
        let diff = p.sub(&target)?;
        let v = Mat::filled(1, 1, diff.sum_sq() / diff.data().len() as f64);
        Ok(self.push(v, Op::MeanSquaredError { pred, target }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let mut acc = |v: Var, d: Mat| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(g)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone())?;
                let cols = g.cols();
                acc(*bias, Mat::from_vec(1, cols, g.col_sums())?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let d = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                )?;
                acc(*a, d)?;
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let d = Mat::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                    offset += cols;
                    acc(*p, d)?;
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let d = g.slice_rows(offset, rows)?;
                    offset += rows;
                    acc(*p, d)?;
                }
            }
            Op::SliceRows { src, start } => {
                let s = self.value(*src);
                let mut d = Mat::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*src, d)?;
            }
            Op::GatherRow { table, row } => {
                let t = self.value(*table);
                let mut d = Mat::zeros(t.rows(), t.cols());
                d.row_mut(*row).copy_from_slice(g.row(0));
                acc(*table, d)?;
            }
            Op::TileRows { src, times } => {
                let s = self.value(*src);
                let mut d = Mat::zeros(s.rows(), s.cols());
                for t in 0..*times {
                    d.add_assign(&g.slice_rows(t * s.rows(), s.rows())?)?;
                }
                acc(*src, d)?;
            }
            Op::MvAttention {
                features,
                garment_front,
                garment_back,
                w_q,
                w_k,
                w_v,
                views,
                cache,
            } => {
                let params = AttentionParams {
                    w_q: self.value(*w_q).clone(),
                    w_k: self.value(*w_k).clone(),
                    w_v: self.value(*w_v).clone(),
                };
                let gf_rows = garment_front.map_or(0, |v| self.value(v).rows());
                let gb_rows = garment_back.map_or(0, |v| self.value(v).rows());
                let upstream = MultiViewFeatures::from_stacked(*views, g.clone())?;
                let d = mvattn::mv_attention_backward(cache, *views, gf_rows, gb_rows, &params, &upstream)?;
                acc(*features, d.features.into_stacked())?;
                if let Some(v) = garment_front {
                    acc(*v, d.garment_front)?;
                }
                if let Some(v) = garment_back {
                    acc(*v, d.garment_back)?;
                }
                acc(*w_q, d.params.w_q)?;
                acc(*w_k, d.params.w_k)?;
                acc(*w_v, d.params.w_v)?;
            }
            Op::CrossAttention {
                hidden,
                condition,
                w_q,
                w_k,
                w_v,
                cache,
            } => {
                let params = AttentionParams {
                    w_q: self.value(*w_q).clone(),
                    w_k: self.value(*w_k).clone(),
                    w_v: self.value(*w_v).clone(),
                };
                let d = mvattn::cross_attention_backward(cache, &params, g)?;
                acc(*hidden, d.hidden)?;
                acc(*condition, d.condition)?;
                acc(*w_q, d.params.w_q)?;
                acc(*w_k, d.params.w_k)?;
                acc(*w_v, d.params.w_v)?;
            }
            Op::MeanSquaredError { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.get(0, 0) / p.data().len() as f64;
                let d = p.sub(target)?.scale(scale);
                acc(*pred, d)?;
            }
        }
        Ok(())
    }
}
