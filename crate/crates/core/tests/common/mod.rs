#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use gcodec::init::{self, SeededRng};
use gcodec::Result;
use rand::Rng;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn rng(seed: u64) -> SeededRng {
    init::stream(seed, 99)
}

pub fn rand_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    init::uniform_tensor(rng, shape, lo, hi, DType::F64).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// One finite-difference probe: element `index` of `var`.
pub struct Probe<'a> {
    pub var: &'a Var,
    pub index: usize,
}

fn nudge(var: &Var, index: usize, delta: f64) {
    let mut v = flat(var.as_tensor());
    v[index] += delta;
    let t = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

/// Largest relative error between backprop gradients of `f` and central
/// differences with step `h`, over the given probes.
pub fn max_fd_error(f: &dyn Fn() -> Result<Tensor>, probes: &[Probe<'_>], h: f64) -> f64 {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for p in probes {
        let g = grads.get(p.var.as_tensor()).map(flat).map(|g| g[p.index]).unwrap_or(0.0);
        nudge(p.var, p.index, h);
        let up = scalar(&f().unwrap());
        nudge(p.var, p.index, -2.0 * h);
        let down = scalar(&f().unwrap());
        nudge(p.var, p.index, h);
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(g, fd);
        if std::env::var_os("FD_DEBUG").is_some() {
            eprintln!("probe {:?}[{}]: analytic {g:e} numeric {fd:e} err {e:e}", p.var.dims(), p.index);
        }
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Probes at `count` pseudo-random positions of each var.
pub fn probes<'a>(vars: &[&'a Var], count: usize, rng: &mut SeededRng) -> Vec<Probe<'a>> {
    let mut out = Vec::new();
    for v in vars {
        let n = v.elem_count();
        for _ in 0..count.min(n) {
            out.push(Probe { var: v, index: rng.gen_range(0..n) });
        }
    }
    out
}
