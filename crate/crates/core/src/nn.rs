//! Neural-network building blocks on top of candle: an im2col convolution
//! with a hand-written backward, conv/BN blocks, an Adam optimizer with
//! serializable state, and parameter hashing.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, Var};
use candle_nn::{Init, ModuleT, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    /// Index of the input coordinate read by output `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

// Column layout: rows = (c, ky, kx), columns = (batch, oy, ox).
fn im2col<T: Copy + Default>(src: &[T], b: usize, g: Geom) -> Vec<T> {
    let l = g.ho * g.wo;
    let rows = g.c * g.k * g.k;
    let plane = g.h * g.w;
    let mut dst = vec![T::default(); rows * b * l];
    for bi in 0..b {
        for ci in 0..g.c {
            let s = &src[(bi * g.c + ci) * plane..][..plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let d = &mut dst[(row * b + bi) * l..][..l];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let srow = &s[iy * g.w..][..g.w];
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                d[oy * g.wo + ox] = srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], b: usize, g: Geom) -> Vec<T> {
    let l = g.ho * g.wo;
    let plane = g.h * g.w;
    let mut dst = vec![T::default(); b * g.c * plane];
    for bi in 0..b {
        for ci in 0..g.c {
            let d = &mut dst[(bi * g.c + ci) * plane..][..plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let s = &src[(row * b + bi) * l..][..l];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                d[iy * g.w + ix] += s[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

struct Im2Col(Geom);
struct Col2Im(Geom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[0];
        let Some((start, end)) = l.contiguous_offsets() else {
            bail!("im2col expects a contiguous input")
        };
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(&v[start..end], b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(&v[start..end], b, g)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.c * g.k * g.k, b * g.ho * g.wo))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[1] / (g.ho * g.wo);
        let Some((start, end)) = l.contiguous_offsets() else {
            bail!("col2im expects a contiguous input")
        };
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(&v[start..end], b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(&v[start..end], b, g)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

/// 2-D convolution `x: B×C×H×W`, `w: Co×C×k×k` via a single GEMM.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 {
        bail!("conv2d: weight {:?} incompatible with input {:?}", w.dims(), x.dims());
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        bail!("conv2d: kernel {k} larger than padded input {h}x{wd}");
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let g = Geom { c, h, w: wd, k, stride, pad, ho, wo };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    w.reshape((co, c * k * k))?
        .matmul(&cols)?
        .reshape((co, b, ho, wo))?
        .transpose(0, 1)?
        .contiguous()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        vb: VarBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> candle_core::Result<Self> {
        let fan_in = (cin * k * k) as f64;
        let weight = vb.get_with_hints(
            (cout, cin, k, k),
            "weight",
            Init::Randn { mean: 0.0, stdev: (2.0 / fan_in).sqrt() },
        )?;
        let bias = if bias {
            Some(vb.get_with_hints(cout, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

pub fn batch_norm(vb: VarBuilder, channels: usize) -> candle_core::Result<candle_nn::BatchNorm> {
    candle_nn::batch_norm(
        channels,
        candle_nn::BatchNormConfig { eps: 1e-5, remove_mean: true, affine: true, momentum: 0.1 },
        vb,
    )
}

/// Convolution, batch-norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: candle_nn::BatchNorm,
}

impl ConvBnRelu {
    pub fn new(vb: VarBuilder, cin: usize, cout: usize, stride: usize) -> candle_core::Result<Self> {
        Ok(Self {
            conv: Conv2d::new(vb.pp("conv"), cin, cout, 3, stride, false)?,
            bn: batch_norm(vb.pp("bn"), cout)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()
    }
}

/// All variables of a map sorted by name.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().unwrap();
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// SHA-256 over names and little-endian bytes of the selected variables.
pub fn hash_vars(vars: &[(String, Var)]) -> candle_core::Result<String> {
    let mut h = Sha256::new();
    for (name, var) in vars {
        h.update(name.as_bytes());
        h.update(tensor_bytes(var.as_tensor())?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn tensor_bytes(t: &Tensor) -> candle_core::Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.97, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Adam over a named set of variables; moments are kept per name so the
/// state can be checkpointed and restored.
pub struct Adam {
    pub config: AdamConfig,
    vars: Vec<(String, Var)>,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Self {
        Self { config, vars, step: 0, moments: BTreeMap::new() }
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Variables without a gradient (running statistics, frozen parts) are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * c.weight_decay)?)?;
            }
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * c.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors keyed `"<name>#m"` / `"<name>#v"`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.moments
            .iter()
            .flat_map(|(n, (m, v))| [(format!("{n}#m"), m.clone()), (format!("{n}#v"), v.clone())])
            .collect()
    }

    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.moments.clear();
        for (name, _) in &self.vars {
            if let (Some(m), Some(v)) = (tensors.get(&format!("{name}#m")), tensors.get(&format!("{name}#v"))) {
                self.moments.insert(name.clone(), (m.clone(), v.clone()));
            }
        }
    }
}
