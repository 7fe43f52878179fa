//! Fourier × sine grid, spectral operators and transforms.
//!
//! Spectral arrays are indexed `n * nz + m`: `n` is the FFT index of the
//! horizontal wavenumber, `m` the vertical mode (`m = 0` is unused for sine
//! fields). Physical arrays are indexed `i * nx + j` with `z_i = i·Lz/nz`
//! and `x_j = j·Lx/nx`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct RbcGrid {
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
    /// Horizontal wavenumber of FFT index `n`.
    pub kx: Vec<f64>,
    /// Vertical wavenumber `mπ/Lz`.
    pub kz: Vec<f64>,
    /// `kx² + kz²` per spectral index.
    pub k2: Vec<f64>,
    /// Modes kept by the 2/3 rule.
    pub kept: Vec<bool>,
    n_keep: usize,
    m_keep: usize,
}

impl RbcGrid {
    pub fn new(nx: usize, nz: usize, lx: f64, lz: f64) -> Result<Self> {
        if !nx.is_power_of_two() || !nz.is_power_of_two() || nz < 4 {
            return Err(Error::config(format!("grid {nx}x{nz} must use powers of two with nz >= 4")));
        }
        if nx < 2 * nz {
            return Err(Error::config(format!("grid needs nx >= 2 nz, got {nx}x{nz}")));
        }
        if !(lx > 0.0 && lz > 0.0) {
            return Err(Error::config("domain extents must be positive"));
        }
        let kx: Vec<f64> = (0..nx).map(|n| 2.0 * PI * signed(n, nx) as f64 / lx).collect();
        let kz: Vec<f64> = (0..nz).map(|m| m as f64 * PI / lz).collect();
        let n_keep = (nx - 1) / 3;
        let m_keep = (2 * nz - 1) / 3;
        let mut k2 = vec![0.0; nx * nz];
        let mut kept = vec![false; nx * nz];
        for n in 0..nx {
            for m in 0..nz {
                k2[n * nz + m] = kx[n] * kx[n] + kz[m] * kz[m];
                kept[n * nz + m] = m >= 1 && m <= m_keep && signed(n, nx).unsigned_abs() <= n_keep;
            }
        }
        Ok(RbcGrid {
            nx,
            nz,
            lx,
            lz,
            kx,
            kz,
            k2,
            kept,
            n_keep,
            m_keep,
        })
    }

    pub fn desk_default() -> Self {
        RbcGrid::new(128, 64, 4.0, 1.0).expect("default grid is valid")
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signed horizontal mode number of FFT index `n`.
    pub fn n_signed(&self, n: usize) -> isize {
        signed(n, self.nx)
    }

    /// FFT index of signed horizontal mode `ns`.
    pub fn n_index(&self, ns: isize) -> usize {
        ns.rem_euclid(self.nx as isize) as usize
    }

    pub fn idx(&self, n: usize, m: usize) -> usize {
        n * self.nz + m
    }

    pub fn dealias_limits(&self) -> (usize, usize) {
        (self.n_keep, self.m_keep)
    }

    pub fn zeros(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); self.len()]
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dz(&self) -> f64 {
        self.lz / self.nz as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn z(&self, i: usize) -> f64 {
        i as f64 * self.dz()
    }

    /// Zeroes everything outside the 2/3-rule zone.
    pub fn dealias(&self, f: &mut [C64]) {
        for (c, &keep) in f.iter_mut().zip(&self.kept) {
            if !keep {
                *c = C64::new(0.0, 0.0);
            }
        }
    }

    /// `∫∫ f g` for real fields given by sine-basis coefficients.
    pub fn inner(&self, f: &[C64], g: &[C64]) -> f64 {
        let s: f64 = f.iter().zip(g).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        0.5 * self.lx * self.lz * s
    }

    pub fn norm(&self, f: &[C64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    pub fn deriv_x(&self, f: &[C64]) -> Vec<C64> {
        f.iter().enumerate().map(|(s, c)| I * self.kx[s / self.nz] * c).collect()
    }

    /// `∂z` of a sine field, as cosine coefficients.
    pub fn deriv_z(&self, f: &[C64]) -> Vec<C64> {
        f.iter().enumerate().map(|(s, c)| self.kz[s % self.nz] * c).collect()
    }

    pub fn laplacian(&self, f: &[C64]) -> Vec<C64> {
        f.iter().zip(&self.k2).map(|(c, k)| -k * c).collect()
    }

    /// Streamfunction with `Δψ = −ζ`.
    pub fn streamfunction(&self, zeta: &[C64]) -> Vec<C64> {
        zeta.iter()
            .zip(&self.k2)
            .map(|(c, &k)| if k > 0.0 { c / k } else { C64::new(0.0, 0.0) })
            .collect()
    }

    /// Velocities `(u, w) = (∂zψ, −∂xψ)`; `u` as cosine coefficients.
    pub fn velocities(&self, zeta: &[C64]) -> (Vec<C64>, Vec<C64>) {
        let psi = self.streamfunction(zeta);
        let u = self.deriv_z(&psi);
        let w = self.deriv_x(&psi).into_iter().map(|c| -c).collect();
        (u, w)
    }

    /// Keeps horizontal modes `|n| ≤ n_obs` and vertical modes `m ≤ n_obs`.
    pub fn galerkin_project(&self, f: &mut [C64], n_obs: usize) {
        for n in 0..self.nx {
            let far = self.n_signed(n).unsigned_abs() > n_obs;
            for m in 0..self.nz {
                if far || m > n_obs || m == 0 {
                    f[n * self.nz + m] = C64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Spectral indices kept by `galerkin_project`.
    pub fn observed_modes(&self, n_obs: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for n in 0..self.nx {
            if self.n_signed(n).unsigned_abs() <= n_obs {
                for m in 1..=n_obs.min(self.nz - 1) {
                    out.push(n * self.nz + m);
                }
            }
        }
        out
    }
}

fn signed(n: usize, len: usize) -> isize {
    if n <= len / 2 {
        n as isize
    } else {
        n as isize - len as isize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZBasis {
    Sine,
    Cosine,
}

/// FFT plans and buffers for one grid.
pub struct Transforms {
    nx: usize,
    nz: usize,
    x_fwd: Arc<dyn Fft<f64>>,
    x_inv: Arc<dyn Fft<f64>>,
    z_fwd: Arc<dyn Fft<f64>>,
    z_inv: Arc<dyn Fft<f64>>,
    col: Vec<C64>,
    scratch: Vec<C64>,
}

impl Transforms {
    pub fn new(grid: &RbcGrid) -> Self {
        let mut planner = FftPlanner::new();
        let (nx, nz) = (grid.nx, grid.nz);
        let x_fwd = planner.plan_fft_forward(nx);
        let x_inv = planner.plan_fft_inverse(nx);
        let z_fwd = planner.plan_fft_forward(2 * nz);
        let z_inv = planner.plan_fft_inverse(2 * nz);
        let scratch_len = [&x_fwd, &x_inv, &z_fwd, &z_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Transforms {
            nx,
            nz,
            x_fwd,
            x_inv,
            z_fwd,
            z_inv,
            col: vec![C64::new(0.0, 0.0); 2 * nz * nx],
            scratch: vec![C64::new(0.0, 0.0); scratch_len],
        }
    }

    /// Spectral coefficients to grid values. A real field comes out real;
    /// `spec = â + i b̂` gives `a + i b`.
    pub fn synthesize(&mut self, spec: &[C64], basis: ZBasis, phys: &mut [C64]) {
        let (nx, nz) = (self.nx, self.nz);
        let zero = C64::new(0.0, 0.0);
        let mut active = Vec::with_capacity(nx);
        for n in 0..nx {
            let a = &spec[n * nz..(n + 1) * nz];
            if a.iter().all(|c| *c == zero) {
                continue;
            }
            let buf = &mut self.col[active.len() * 2 * nz..(active.len() + 1) * 2 * nz];
            buf[0] = match basis {
                ZBasis::Sine => zero,
                ZBasis::Cosine => 2.0 * a[0],
            };
            buf[nz] = zero;
            for m in 1..nz {
                buf[m] = a[m];
                buf[2 * nz - m] = match basis {
                    ZBasis::Sine => -a[m],
                    ZBasis::Cosine => a[m],
                };
            }
            active.push(n);
        }
        phys.iter_mut().for_each(|p| *p = zero);
        if !active.is_empty() {
            let used = active.len() * 2 * nz;
            self.z_inv.process_with_scratch(&mut self.col[..used], &mut self.scratch);
            let factor = match basis {
                ZBasis::Sine => C64::new(0.0, -0.5),
                ZBasis::Cosine => C64::new(0.5, 0.0),
            };
            for (c, &n) in active.iter().enumerate() {
                let buf = &self.col[c * 2 * nz..(c + 1) * 2 * nz];
                for i in 0..nz {
                    phys[i * nx + n] = buf[i] * factor;
                }
            }
        }
        self.x_inv.process_with_scratch(phys, &mut self.scratch);
    }

    /// Grid values of a sine-type field to sine coefficients; `phys` is
    /// overwritten. Packed `a + i b` input gives `â + i b̂`.
    pub fn analyze(&mut self, phys: &mut [C64], spec: &mut [C64]) {
        let (nx, nz) = (self.nx, self.nz);
        self.x_fwd.process_with_scratch(phys, &mut self.scratch);
        let inv_nx = 1.0 / nx as f64;
        for n in 0..nx {
            let buf = &mut self.col[n * 2 * nz..(n + 1) * 2 * nz];
            buf[0] = C64::new(0.0, 0.0);
            buf[nz] = C64::new(0.0, 0.0);
            for i in 1..nz {
                let v = phys[i * nx + n] * inv_nx;
                buf[i] = v;
                buf[2 * nz - i] = -v;
            }
        }
        self.z_fwd.process_with_scratch(&mut self.col, &mut self.scratch);
        let factor = C64::new(0.0, 1.0 / nz as f64);
        for n in 0..nx {
            let buf = &self.col[n * 2 * nz..(n + 1) * 2 * nz];
            spec[n * nz] = C64::new(0.0, 0.0);
            for m in 1..nz {
                spec[n * nz + m] = buf[m] * factor;
            }
        }
    }

    /// Splits the analysis of a packed field `a + i b` into `â` and `b̂`.
    pub fn unpack(&self, packed: &[C64], a: &mut [C64], b: &mut [C64]) {
        let (nx, nz) = (self.nx, self.nz);
        for n in 0..nx {
            let nn = (nx - n) % nx;
            for m in 0..nz {
                let p = packed[n * nz + m];
                let q = packed[nn * nz + m].conj();
                a[n * nz + m] = 0.5 * (p + q);
                b[n * nz + m] = (p - q) * C64::new(0.0, -0.5);
            }
        }
    }
}
