//! Learned sparse-to-dense flow completion.
//!
//! A feature-guided bilateral densifier: for query pixel `q` and control
//! pixels `s`,
//!
//! ```text
//! out(q) = sum_s a(q,s) v_s / (sum_s a(q,s) + kappa(q))
//! a(q,s) = exp(-|q-s|^2 / (2 sigma^2)) * exp(-|f(q) - f(s)|^2)
//! ```
//!
//! with per-pixel features `f` and damping `kappa >= 0` predicted from the
//! first frame. Affinity lets motion follow object boundaries; damping lets
//! pixels far from any control stay still. No controls means zero output.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use trajvid_core::trajectory::SparseFlow;
use trajvid_core::{FlowField, Frame};

use super::layers::{Conv2d, ConvSpec};
use super::params::{Group, Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    /// Initial spatial bandwidth as a fraction of the longer image side.
    pub sigma_fraction: f64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            feature_dim: 4,
            sigma_fraction: 0.125,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub config: CompletionConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    log_sigma: Tensor,
}

impl Completion {
    pub fn new(ps: &mut ParamStore, config: &CompletionConfig, height: usize, width: usize) -> Result<Self> {
        let sigma0 = (config.sigma_fraction * height.max(width) as f64).max(0.5);
        Ok(Self {
            config: config.clone(),
            conv1: Conv2d::new(ps, "completion.conv1", Group::Completion, ConvSpec::new(3, config.hidden, 3))?,
            conv2: Conv2d::new(
                ps,
                "completion.conv2",
                Group::Completion,
                ConvSpec::new(config.hidden, config.feature_dim + 1, 3),
            )?,
            log_sigma: ps.create("completion.log_sigma", &[1], Group::Completion, Init::Constant(sigma0.ln()))?,
        })
    }

    /// Dense flow `(T-1, 2, H, W)` for one sparse input; `frame` is `(3, H, W)`.
    pub fn forward(&self, frame: &Tensor, sparse: &SparseFlow) -> Result<Tensor> {
        let flow = sparse.flow();
        let (frames, h, w) = (flow.frames(), flow.height(), flow.width());
        let (c, fh, fw) = frame.dims3()?;
        if (c, fh, fw) != (3, h, w) {
            return Err(Error::ModelShapeMismatch(format!(
                "completion frame is {c}x{fh}x{fw}, flow is {h}x{w}"
            )));
        }
        let dtype = frame.dtype();
        let dev = Device::Cpu;
        let p = h * w;
        let head = self.conv2.forward(&self.conv1.forward(&frame.unsqueeze(0)?)?.silu()?)?;
        let head = head.squeeze(0)?.reshape((self.config.feature_dim + 1, p))?.t()?;
        let feats = head.narrow(1, 0, self.config.feature_dim)?.contiguous()?;
        // softplus
        let kappa = (head.narrow(1, self.config.feature_dim, 1)?.exp()? + 1.0)?.log()?;
        let sq = feats.sqr()?.sum_keepdim(1)?;
        let inv_two_sigma2 = ((self.log_sigma.clone() * 2.0)?.exp()? * 2.0)?.recip()?;

        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let sources = sparse.sources(t);
            if sources.is_empty() {
                out.push(Tensor::zeros((2, h, w), dtype, &dev)?);
                continue;
            }
            let s = sources.len();
            let idx: Vec<u32> = sources.iter().map(|&(x, y, _, _)| (y * w + x) as u32).collect();
            let mut d2 = Vec::with_capacity(p * s);
            for q in 0..p {
                let (qy, qx) = ((q / w) as f64, (q % w) as f64);
                for &(x, y, _, _) in &sources {
                    d2.push((qx - x as f64).powi(2) + (qy - y as f64).powi(2));
                }
            }
            let d2 = Tensor::from_vec(d2, (p, s), &dev)?.to_dtype(dtype)?;
            let vals: Vec<f64> = sources.iter().flat_map(|&(_, _, dx, dy)| [dx as f64, dy as f64]).collect();
            let vals = Tensor::from_vec(vals, (s, 2), &dev)?.to_dtype(dtype)?;
            let idx = Tensor::from_vec(idx, s, &dev)?;

            let fs = feats.index_select(&idx, 0)?;
            let sq_s = sq.index_select(&idx, 0)?.t()?;
            let fdist = (sq.broadcast_add(&sq_s)? - (feats.matmul(&fs.t()?)? * 2.0)?)?.relu()?;
            let spatial = d2.broadcast_mul(&inv_two_sigma2)?;
            let a = (spatial + fdist)?.neg()?.exp()?;
            let num = a.matmul(&vals)?;
            let den = a.sum_keepdim(D::Minus1)?.add(&kappa)?;
            let dense = num.broadcast_div(&(den + 1e-12)?)?;
            out.push(dense.t()?.reshape((2, h, w))?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    pub fn complete(&self, frame: &Frame, sparse: &SparseFlow, dtype: DType) -> Result<FlowField> {
        let f = Tensor::from_vec(frame.data().to_vec(), (3, frame.height(), frame.width()), &Device::Cpu)?.to_dtype(dtype)?;
        let dense = self.forward(&f, sparse)?;
        let flow = sparse.flow();
        let data = dense.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(FlowField::new(flow.frames(), flow.height(), flow.width(), true, data)?)
    }
}
