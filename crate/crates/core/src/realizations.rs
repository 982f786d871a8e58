//! Explicit finite-dimensional realizations: Born-rule probabilities,
//! numeric moment matrices, random sampling and the sampled moment span.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::{MonomialBasis, OperatorWord};
use crate::error::{Error, Result};
use crate::moment::{CorrelationTable, MomentModel, Scenario};
use crate::sdp::{hermitian_min_eigenvalue, Equality};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

const VALIDATION_TOL: f64 = 1e-10;
/// Eigenvalues above this count towards the rank of a POVM element.
pub const RANK_TOL: f64 = 1e-8;
/// Relative residual below which a sample adds nothing to the span.
pub const SPAN_RANK_TOL: f64 = 1e-8;
/// Consecutive rank-stable batches that count as saturation.
pub const SATURATION_BATCHES: usize = 3;
pub const DEFAULT_BATCH: usize = 50;
pub const DEFAULT_MAX_BATCHES: usize = 40;

trait MaxAbs {
    fn max_abs(&self) -> f64;
}

impl MaxAbs for CMatrix {
    fn max_abs(&self) -> f64 {
        self.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn ket(v: &[C64]) -> CMatrix {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// `|v⟩⟨v|`.
pub fn projector(v: &[C64]) -> CMatrix {
    let k = ket(v);
    &k * k.adjoint()
}

fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// State, instruments (Kraus form) and measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub rho: CMatrix,
    /// `instruments[x][a]` is the Kraus list of `I_{a|x}`.
    pub instruments: Vec<Vec<Vec<CMatrix>>>,
    /// `povms[y][b]` is `E_{b|y}`.
    pub povms: Vec<Vec<CMatrix>>,
}

impl Realization {
    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let n_a = self.instruments.first().map_or(0, |i| i.len());
        let n_b = self.povms.first().map_or(0, |p| p.len());
        Scenario::new(n_a, self.instruments.len(), n_b, self.povms.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let bad = |m: String| Err(Error::InvalidRealization(m));
        if self.rho.ncols() != d || d == 0 {
            return bad("state is not a nonempty square matrix".into());
        }
        if (&self.rho - self.rho.adjoint()).max_abs() > VALIDATION_TOL {
            return bad("state is not Hermitian".into());
        }
        if (trace(&self.rho) - c(1.0)).norm() > VALIDATION_TOL {
            return bad("state trace differs from 1".into());
        }
        if hermitian_min_eigenvalue(&self.rho) < -VALIDATION_TOL {
            return bad("state is not PSD".into());
        }
        let s = self.scenario()?;
        let id = CMatrix::identity(d, d);
        for (x, inst) in self.instruments.iter().enumerate() {
            if inst.len() != s.n_a {
                return bad(format!(
                    "instrument {x} has {} outcomes, expected {}",
                    inst.len(),
                    s.n_a
                ));
            }
            let mut total = CMatrix::zeros(d, d);
            for kraus in inst {
                for k in kraus {
                    if k.ncols() != d || k.nrows() != d {
                        return bad(format!("instrument {x}: Kraus operator is not {d}×{d}"));
                    }
                    total += k.adjoint() * k;
                }
            }
            if (total - &id).max_abs() > VALIDATION_TOL {
                return bad(format!("instrument {x} is not trace preserving"));
            }
        }
        for (y, povm) in self.povms.iter().enumerate() {
            if povm.len() != s.n_b {
                return bad(format!(
                    "measurement {y} has {} outcomes, expected {}",
                    povm.len(),
                    s.n_b
                ));
            }
            let mut total = CMatrix::zeros(d, d);
            for e in povm {
                if e.nrows() != d || e.ncols() != d {
                    return bad(format!("measurement {y}: element is not {d}×{d}"));
                }
                if (e - e.adjoint()).max_abs() > VALIDATION_TOL
                    || hermitian_min_eigenvalue(e) < -VALIDATION_TOL
                {
                    return bad(format!("measurement {y}: element is not PSD"));
                }
                total += e;
            }
            if (total - &id).max_abs() > VALIDATION_TOL {
                return bad(format!("measurement {y} does not sum to identity"));
            }
        }
        Ok(())
    }

    /// `I_{a|x}(ρ)`.
    pub fn post_state(&self, a: usize, x: usize) -> CMatrix {
        let d = self.dim();
        let mut out = CMatrix::zeros(d, d);
        for k in &self.instruments[x][a] {
            out += k * &self.rho * k.adjoint();
        }
        out
    }

    /// Operator product of the word's letters, left to right.
    pub fn word_operator(&self, w: &OperatorWord) -> CMatrix {
        let d = self.dim();
        let mut out = CMatrix::identity(d, d);
        for g in w.letters() {
            out *= &self.povms[g.setting][g.outcome];
        }
        out
    }

    /// `true` when every measurement element is a projector.
    pub fn is_projective(&self) -> bool {
        self.povms
            .iter()
            .flatten()
            .all(|e| (e * e - e).max_abs() < 1e-9)
    }
}

/// `P(a,b|x,y) = tr[E_{b|y} I_{a|x}(ρ)]`.
pub fn born_probabilities(r: &Realization) -> Result<CorrelationTable> {
    let s = r.scenario()?;
    let mut t = CorrelationTable::zeros(s);
    for x in 0..s.n_x {
        for a in 0..s.n_a {
            let sigma = r.post_state(a, x);
            for y in 0..s.n_y {
                for b in 0..s.n_b {
                    let p = trace(&(&r.povms[y][b] * &sigma)).re;
                    t.set(a, b, x, y, p);
                }
            }
        }
    }
    Ok(t)
}

/// `χ_{a|x}[i,j] = tr[I_{a|x}(ρ) S_j† S_i]` computed from operator products,
/// in scenario block order.
pub fn numeric_moments(r: &Realization, basis: &MonomialBasis) -> Result<Vec<CMatrix>> {
    let s = r.scenario()?;
    for w in basis.words() {
        for g in w.letters() {
            if g.setting >= s.n_y || g.outcome + 1 >= s.n_b {
                return Err(Error::invalid(format!(
                    "basis letter {g} does not match the realization"
                )));
            }
        }
    }
    let ops: Vec<CMatrix> = basis.words().iter().map(|w| r.word_operator(w)).collect();
    let n = ops.len();
    let mut out = Vec::with_capacity(s.n_blocks());
    for idx in 0..s.n_blocks() {
        let (a, x) = s.block_label(idx);
        let sigma = r.post_state(a, x);
        let m = CMatrix::from_fn(n, n, |i, j| trace(&(&sigma * ops[j].adjoint() * &ops[i])));
        out.push(m);
    }
    Ok(out)
}

/// Values of every model variable at the realization.
pub fn moment_vector(r: &Realization, model: &MomentModel) -> Vec<f64> {
    let layout = model.layout();
    let ops: Vec<CMatrix> = layout
        .classes()
        .iter()
        .map(|c| r.word_operator(&c.word))
        .collect();
    let mut v = vec![0.0; model.n_vars()];
    for b in model.blocks() {
        let sigma = r.post_state(b.a, b.x);
        for (class, op) in layout.classes().iter().zip(&ops) {
            let m = trace(&(&sigma * op));
            v[b.offset + class.re] = m.re;
            if let Some(im) = class.im {
                v[b.offset + im] = m.im;
            }
        }
    }
    v
}

/// Rank constraint on the measurement elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankSpec {
    /// Every element has rank exactly `k`.
    Fixed(usize),
    /// Projective measurements of arbitrary rank.
    Unconstrained,
}

/// How instruments are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// A random instrument per setting from a random isometry.
    Temporal,
    /// Measure-and-prepare instruments `I_{a|x}(ρ) = tr(ρ)/|A| · σ_{a,x}`
    /// with independent random states; used for prepare-and-measure tasks.
    Prepare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSpec {
    pub dim: usize,
    pub rank: RankSpec,
    pub mode: SamplingMode,
}

impl SampleSpec {
    pub fn new(dim: usize, rank: RankSpec, mode: SamplingMode) -> Self {
        SampleSpec { dim, rank, mode }
    }

    fn check(&self, scenario: &Scenario) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if let RankSpec::Fixed(k) = self.rank {
            if k == 0 || k > self.dim {
                return Err(Error::invalid(format!(
                    "rank {k} must lie in 1..={}",
                    self.dim
                )));
            }
            if k * scenario.n_b < self.dim {
                return Err(Error::invalid(format!(
                    "{} rank-{k} elements cannot sum to the identity in dimension {}",
                    scenario.n_b, self.dim
                )));
            }
        }
        Ok(())
    }

    /// Whether samples are projective, which the moment model assumes.
    pub fn is_projective(&self, scenario: &Scenario) -> bool {
        match self.rank {
            RankSpec::Fixed(k) => k * scenario.n_b == self.dim,
            RankSpec::Unconstrained => true,
        }
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * FRAC_1_SQRT_2
    })
}

/// Haar-random unitary from the QR decomposition of a Gaussian matrix.
pub fn random_unitary<R: Rng>(n: usize, rng: &mut R) -> CMatrix {
    let g = gaussian_matrix(n, n, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { c(1.0) };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Normalized `G G†` with Gaussian `G`.
pub fn random_state<R: Rng>(d: usize, rng: &mut R) -> CMatrix {
    let g = gaussian_matrix(d, d, rng);
    let m = &g * g.adjoint();
    let t = trace(&m);
    m / t
}

fn hermitian_power(m: &CMatrix, p: f64) -> CMatrix {
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| c(v.max(0.0).powf(p)));
    &e.eigenvectors * CMatrix::from_diagonal(&d) * e.eigenvectors.adjoint()
}

pub fn numerical_rank(m: &CMatrix) -> usize {
    let herm = (m + m.adjoint()) * c(0.5);
    herm.symmetric_eigenvalues()
        .iter()
        .filter(|&&v| v > RANK_TOL)
        .count()
}

fn random_povm<R: Rng>(d: usize, n_b: usize, rank: RankSpec, rng: &mut R) -> Vec<CMatrix> {
    match rank {
        RankSpec::Fixed(k) if k * n_b == d => {
            let u = random_unitary(d, rng);
            (0..n_b)
                .map(|b| {
                    let cols = u.columns(b * k, k);
                    cols * cols.adjoint()
                })
                .collect()
        }
        RankSpec::Fixed(k) => loop {
            let parts: Vec<CMatrix> = (0..n_b)
                .map(|_| {
                    let g = gaussian_matrix(d, k, rng);
                    &g * g.adjoint()
                })
                .collect();
            let total = parts.iter().fold(CMatrix::zeros(d, d), |acc, p| acc + p);
            let w = hermitian_power(&total, -0.5);
            let povm: Vec<CMatrix> = parts
                .iter()
                .map(|p| {
                    let e = &w * p * &w;
                    (&e + e.adjoint()) * c(0.5)
                })
                .collect();
            if povm.iter().all(|e| numerical_rank(e) == k) {
                break povm;
            }
        },
        RankSpec::Unconstrained => {
            let u = random_unitary(d, rng);
            let mut povm = vec![CMatrix::zeros(d, d); n_b];
            for j in 0..d {
                let b = rng.random_range(0..n_b);
                let col = u.column(j);
                povm[b] += col * col.adjoint();
            }
            povm
        }
    }
}

fn temporal_instrument<R: Rng>(d: usize, n_a: usize, rng: &mut R) -> Vec<Vec<CMatrix>> {
    // Isometry d → (outcome ⊗ environment ⊗ system), environment of size d.
    let big = n_a * d * d;
    let v = random_unitary(big, rng).columns(0, d).into_owned();
    (0..n_a)
        .map(|a| {
            (0..d)
                .map(|e| v.rows((a * d + e) * d, d).into_owned())
                .collect()
        })
        .collect()
}

fn prepare_instrument<R: Rng>(d: usize, n_a: usize, rng: &mut R) -> Vec<Vec<CMatrix>> {
    (0..n_a)
        .map(|_| {
            let sigma = random_state(d, rng);
            let e = sigma.symmetric_eigen();
            let mut kraus = Vec::new();
            for (i, &lam) in e.eigenvalues.iter().enumerate() {
                let v = e.eigenvectors.column(i);
                let w = (lam.max(0.0) / n_a as f64).sqrt();
                for j in 0..d {
                    let mut k = CMatrix::zeros(d, d);
                    for r in 0..d {
                        k[(r, j)] = v[r] * w;
                    }
                    kraus.push(k);
                }
            }
            kraus
        })
        .collect()
}

pub fn sample_with<R: Rng>(
    spec: &SampleSpec,
    scenario: &Scenario,
    rng: &mut R,
) -> Result<Realization> {
    spec.check(scenario)?;
    let d = spec.dim;
    let rho = random_state(d, rng);
    let instruments = (0..scenario.n_x)
        .map(|_| match spec.mode {
            SamplingMode::Temporal => temporal_instrument(d, scenario.n_a, rng),
            SamplingMode::Prepare => prepare_instrument(d, scenario.n_a, rng),
        })
        .collect();
    let povms = (0..scenario.n_y)
        .map(|_| random_povm(d, scenario.n_b, spec.rank, rng))
        .collect();
    Ok(Realization {
        rho,
        instruments,
        povms,
    })
}

/// Random temporal realization in dimension `d` with rank-`k` measurement
/// elements, deterministic in `seed`.
pub fn sample_realization(
    d: usize,
    k: usize,
    scenario: &Scenario,
    seed: u64,
) -> Result<Realization> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(
        &SampleSpec::new(d, RankSpec::Fixed(k), SamplingMode::Temporal),
        scenario,
        &mut rng,
    )
}

/// Qubit realization reaching `K_CHSH = 2√2`: maximally mixed state,
/// Lüders Z/X instruments, measurements `(Z ± X)/√2`.
pub fn chsh_reference() -> Realization {
    let z = [[c(1.0), c(0.0)], [c(0.0), c(1.0)]];
    let h = FRAC_1_SQRT_2;
    let x = [[c(h), c(h)], [c(h), c(-h)]];
    let lueders = |basis: [[C64; 2]; 2]| -> Vec<Vec<CMatrix>> {
        basis.iter().map(|v| vec![projector(v)]).collect()
    };
    let pz = DMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
    let px = DMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
    let id = CMatrix::identity(2, 2);
    let povms = (0..2)
        .map(|y| {
            let sign = if y == 0 { 1.0 } else { -1.0 };
            let obs = (&pz + &px * c(sign)) * c(h);
            let e0 = (&id + &obs) * c(0.5);
            let e1 = &id - &e0;
            vec![e0, e1]
        })
        .collect();
    Realization {
        rho: id * c(0.5),
        instruments: vec![lueders(z), lueders(x)],
        povms,
    }
}

/// Reference states `ψ_{x0 x1}` of the optimal 2→1 random access code.
pub fn qrac_reference_states() -> Vec<Vec<C64>> {
    let (cc, s) = ((PI / 8.0).cos(), (PI / 8.0).sin());
    // Ordered by (x0, x1): 00, 01, 10, 11.
    vec![
        vec![c(cc), c(s)],
        vec![c(-cc), c(s)],
        vec![c(s), c(cc)],
        vec![c(s), c(-cc)],
    ]
}

/// The 2→1 code as a temporal realization: block `(a', x') = (x0, x1)`
/// prepares `ψ_{x0 x1}` with probability 1/2; measurements Z and X.
pub fn qrac_reference() -> Realization {
    let states = qrac_reference_states();
    let h = FRAC_1_SQRT_2;
    let instruments = (0..2)
        .map(|x1| {
            (0..2)
                .map(|x0| {
                    let psi = &states[2 * x0 + x1];
                    (0..2)
                        .map(|j| {
                            let mut k = CMatrix::zeros(2, 2);
                            for r in 0..2 {
                                k[(r, j)] = psi[r] * h;
                            }
                            k
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let plus = [c(h), c(h)];
    let id = CMatrix::identity(2, 2);
    let e0z = projector(&[c(1.0), c(0.0)]);
    let e0x = projector(&plus);
    let povms = vec![vec![e0z.clone(), &id - &e0z], vec![e0x.clone(), &id - &e0x]];
    Realization {
        rho: projector(&[c(1.0), c(0.0)]),
        instruments,
        povms,
    }
}

/// Metadata of a sampled span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanMeta {
    pub spec: SampleSpec,
    pub scenario: Scenario,
    pub level: usize,
    pub seed: u64,
    pub batch: usize,
    pub samples: usize,
    /// Rank after each batch.
    pub trace: Vec<usize>,
}

/// Orthonormal basis of the span of sampled moment vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanBasis {
    pub ambient: usize,
    pub vectors: Vec<Vec<f64>>,
    pub meta: SpanMeta,
}

const SPAN_MAGIC: &[u8; 8] = b"IMMSPAN1";

#[derive(Serialize, Deserialize)]
struct SpanHeader {
    ambient: usize,
    rank: usize,
    meta: SpanMeta,
    id: String,
}

impl SpanBasis {
    pub fn rank(&self) -> usize {
        self.vectors.len()
    }

    /// SHA-256 over metadata and basis vectors.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).expect("metadata serializes"));
        h.update((self.ambient as u64).to_le_bytes());
        for v in &self.vectors {
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `‖v − Pv‖ / ‖v‖`, zero for the zero vector.
    pub fn residual(&self, v: &[f64]) -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let mut r = v.to_vec();
        for b in &self.vectors {
            let d: f64 = b.iter().zip(&r).map(|(p, q)| p * q).sum();
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= d * bi;
            }
        }
        r.iter().map(|x| x * x).sum::<f64>().sqrt() / norm
    }

    /// Gram–Schmidt with one reorthogonalization; returns whether `v` added
    /// a new direction.
    fn absorb(&mut self, v: &[f64]) -> bool {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return false;
        }
        let mut r: Vec<f64> = v.iter().map(|x| x / norm).collect();
        for _ in 0..2 {
            for b in &self.vectors {
                let d: f64 = b.iter().zip(&r).map(|(p, q)| p * q).sum();
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= d * bi;
                }
            }
        }
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn <= SPAN_RANK_TOL {
            return false;
        }
        self.vectors.push(r.into_iter().map(|x| x / rn).collect());
        true
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = SpanHeader {
            ambient: self.ambient,
            rank: self.rank(),
            meta: self.meta.clone(),
            id: self.id(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(SPAN_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.vectors {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SPAN_MAGIC {
            return Err(Error::Parse("not a span artifact".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Parse("span header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: SpanHeader = serde_json::from_slice(&json)?;
        let mut vectors = Vec::with_capacity(header.rank);
        let mut buf = [0u8; 8];
        for _ in 0..header.rank {
            let mut v = Vec::with_capacity(header.ambient);
            for _ in 0..header.ambient {
                r.read_exact(&mut buf)?;
                v.push(f64::from_le_bytes(buf));
            }
            vectors.push(v);
        }
        let sb = SpanBasis {
            ambient: header.ambient,
            vectors,
            meta: header.meta,
        };
        if sb.id() != header.id {
            return Err(Error::Parse("span artifact content hash mismatch".into()));
        }
        Ok(sb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Sample batches of realizations and orthonormalize their moment vectors
/// until the rank is stable for `SATURATION_BATCHES` batches.
pub fn build_span(
    spec: SampleSpec,
    model: &MomentModel,
    seed: u64,
    batch: usize,
    max_batches: usize,
) -> Result<SpanBasis> {
    let scenario = model.scenario();
    spec.check(&scenario)?;
    if !spec.is_projective(&scenario) {
        return Err(Error::invalid(format!(
            "rank {:?} in dimension {} with {} outcomes gives non-projective measurements, \
             which the moment model does not describe",
            spec.rank, spec.dim, scenario.n_b
        )));
    }
    let mut sb = SpanBasis {
        ambient: model.n_vars(),
        vectors: Vec::new(),
        meta: SpanMeta {
            spec,
            scenario,
            level: model.level(),
            seed,
            batch,
            samples: 0,
            trace: Vec::new(),
        },
    };
    if batch == 0 {
        return Ok(sb);
    }
    let mut stable = 0;
    for b in 0..max_batches {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut grew = false;
        for _ in 0..batch {
            let r = sample_with(&spec, &scenario, &mut rng)?;
            grew |= sb.absorb(&moment_vector(&r, model));
        }
        sb.meta.samples += batch;
        sb.meta.trace.push(sb.rank());
        stable = if grew { 0 } else { stable + 1 };
        if stable >= SATURATION_BATCHES {
            return Ok(sb);
        }
    }
    Err(Error::SpanNotSaturated {
        batches: max_batches,
        trace: sb.meta.trace,
    })
}

/// Rows spanning the orthogonal complement of the span: `n · x = 0` for
/// each, applied to the first `ambient` variables.
pub fn span_constraints(sb: &SpanBasis, model: &MomentModel) -> Result<Vec<Equality>> {
    if sb.ambient != model.n_vars() {
        return Err(Error::SpanMismatch(format!(
            "span has ambient dimension {} but the model has {} variables",
            sb.ambient,
            model.n_vars()
        )));
    }
    if sb.meta.scenario != model.scenario() || sb.meta.level != model.level() {
        return Err(Error::SpanMismatch(format!(
            "span built for scenario {} level {}, model is {} level {}",
            sb.meta.scenario,
            sb.meta.level,
            model.scenario(),
            model.level()
        )));
    }
    let m = sb.ambient;
    let mut p = DMatrix::<f64>::identity(m, m);
    for v in &sb.vectors {
        for i in 0..m {
            for j in 0..m {
                p[(i, j)] -= v[i] * v[j];
            }
        }
    }
    let e = p.symmetric_eigen();
    let mut rows = Vec::new();
    for (k, &lam) in e.eigenvalues.iter().enumerate() {
        if lam > 0.5 {
            let col = e.eigenvectors.column(k);
            let coeffs: Vec<(usize, f64)> = col
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 1e-14)
                .map(|(i, &v)| (i, v))
                .collect();
            rows.push(Equality { coeffs, rhs: 0.0 });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::{bind_data, build_model, chsh_coefficients};

    fn qubit_temporal(k: usize) -> SampleSpec {
        SampleSpec::new(2, RankSpec::Fixed(k), SamplingMode::Temporal)
    }

    #[test]
    fn trivial_born_rule() {
        let zero = projector(&[c(1.0), c(0.0)]);
        let id = CMatrix::identity(2, 2);
        let r = Realization {
            rho: zero.clone(),
            instruments: vec![vec![vec![id.clone()]]],
            povms: vec![vec![zero.clone(), &id - &zero]],
        };
        // A single-outcome instrument makes nA = 1.
        r.validate().unwrap();
        let t = born_probabilities(&r).unwrap();
        assert!((t.get(0, 0, 0, 0) - 1.0).abs() < 1e-15);
        let basis = crate::algebra::build_basis(&r.scenario().unwrap().generators(), 1).unwrap();
        let m = numeric_moments(&r, &basis).unwrap();
        assert!((m[0][(0, 0)] - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn chsh_reference_reaches_tsirelson() {
        let r = chsh_reference();
        r.validate().unwrap();
        let t = born_probabilities(&r).unwrap();
        t.validate(1e-12).unwrap();
        let k = t.evaluate(&chsh_coefficients());
        assert!((k - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn qrac_reference_value() {
        let r = qrac_reference();
        r.validate().unwrap();
        let t = born_probabilities(&r).unwrap();
        let mut total = 0.0;
        for x0 in 0..2 {
            for x1 in 0..2 {
                for y in 0..2 {
                    let bit = if y == 0 { x0 } else { x1 };
                    total += 2.0 * t.get(x0, bit, x1, y);
                }
            }
        }
        assert!((total / 8.0 - (1.0 + FRAC_1_SQRT_2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reference_moments_match_born_rule() {
        let r = chsh_reference();
        let model = build_model(Scenario::chsh(), 1).unwrap();
        let t = born_probabilities(&r).unwrap();
        let blocks = numeric_moments(&r, model.basis()).unwrap();
        for (idx, m) in blocks.iter().enumerate() {
            let (a, x) = model.scenario().block_label(idx);
            assert!((m[(0, 0)].re - t.marginal(a, x)).abs() < 1e-12);
            assert!((m[(1, 1)].re - t.get(a, 0, x, 0)).abs() < 1e-12);
            assert!((m[(2, 2)].re - t.get(a, 0, x, 1)).abs() < 1e-12);
            assert!(hermitian_min_eigenvalue(m) > -1e-12);
        }
        // The moment vector satisfies the data bindings.
        let v = moment_vector(&r, &model);
        for eq in bind_data(&model, &t).unwrap() {
            assert!(eq.residual(&v).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_realizations_are_valid() {
        let s = Scenario::chsh();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            qubit_temporal(1),
            qubit_temporal(2),
            SampleSpec::new(3, RankSpec::Unconstrained, SamplingMode::Temporal),
            SampleSpec::new(2, RankSpec::Fixed(1), SamplingMode::Prepare),
        ] {
            for _ in 0..20 {
                let r = sample_with(&spec, &s, &mut rng).unwrap();
                r.validate().unwrap();
                if let RankSpec::Fixed(k) = spec.rank {
                    assert!(r.povms.iter().flatten().all(|e| numerical_rank(e) == k));
                }
                let t = born_probabilities(&r).unwrap();
                t.validate(1e-10).unwrap();
            }
        }
    }

    #[test]
    fn rank_two_qubit_povm_is_not_projective() {
        let r = sample_realization(2, 2, &Scenario::chsh(), 9).unwrap();
        r.validate().unwrap();
        assert!(r.povms.iter().flatten().all(|e| numerical_rank(e) == 2));
        assert!(!r.is_projective());
    }

    #[test]
    fn rejects_impossible_rank() {
        assert!(sample_realization(3, 1, &Scenario::chsh(), 0).is_err());
        assert!(sample_realization(2, 3, &Scenario::chsh(), 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_realization(2, 1, &Scenario::chsh(), 11).unwrap();
        let b = sample_realization(2, 1, &Scenario::chsh(), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn arrow_of_time_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Scenario::new(3, 2, 3, 3).unwrap();
        let spec = SampleSpec::new(3, RankSpec::Fixed(1), SamplingMode::Temporal);
        for _ in 0..20 {
            let r = sample_with(&spec, &s, &mut rng).unwrap();
            r.validate().unwrap();
            born_probabilities(&r).unwrap().validate(1e-12).unwrap();
        }
    }

    #[test]
    fn numeric_moments_are_psd() {
        let model = build_model(Scenario::chsh(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = SampleSpec::new(3, RankSpec::Unconstrained, SamplingMode::Temporal);
        for _ in 0..1000 {
            let r = sample_with(&spec, &model.scenario(), &mut rng).unwrap();
            for m in numeric_moments(&r, model.basis()).unwrap() {
                assert!((&m - m.adjoint()).max_abs() < 1e-12);
                assert!(hermitian_min_eigenvalue(&m) >= -1e-9);
            }
        }
    }

    #[test]
    fn numeric_moments_match_symbolic_layout() {
        let model = build_model(Scenario::new(2, 2, 3, 2).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = SampleSpec::new(3, RankSpec::Fixed(1), SamplingMode::Temporal);
        for _ in 0..20 {
            let r = sample_with(&spec, &model.scenario(), &mut rng).unwrap();
            let v = moment_vector(&r, &model);
            let numeric = numeric_moments(&r, model.basis()).unwrap();
            for (idx, blk) in model.block_matrices().iter().enumerate() {
                assert!((blk.eval(&v) - &numeric[idx]).max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qubit_rank_one_span_is_deficient() {
        let model = build_model(Scenario::chsh(), 1).unwrap();
        let sb = build_span(
            qubit_temporal(1),
            &model,
            1,
            DEFAULT_BATCH,
            DEFAULT_MAX_BATCHES,
        )
        .unwrap();
        assert_eq!(sb.ambient, 20);
        assert_eq!(sb.rank(), 18);
        assert!(sb.meta.trace.len() > SATURATION_BATCHES);
        for (i, u) in sb.vectors.iter().enumerate() {
            for (j, w) in sb.vectors.iter().enumerate() {
                let d: f64 = u.iter().zip(w).map(|(p, q)| p * q).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        assert_eq!(span_constraints(&sb, &model).unwrap().len(), 2);
    }

    #[test]
    fn span_edge_cases() {
        let model = build_model(Scenario::chsh(), 1).unwrap();
        let empty = build_span(qubit_temporal(1), &model, 1, 0, 10).unwrap();
        assert_eq!(empty.rank(), 0);
        let a = build_span(qubit_temporal(1), &model, 4, 10, 40).unwrap();
        let b = build_span(qubit_temporal(1), &model, 4, 10, 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
        assert!(matches!(
            build_span(qubit_temporal(1), &model, 4, 1, 2),
            Err(Error::SpanNotSaturated { .. })
        ));
        assert!(build_span(qubit_temporal(2), &model, 4, 10, 40).is_err());
        let other = build_model(Scenario::chsh(), 2).unwrap();
        assert!(matches!(
            span_constraints(&a, &other),
            Err(Error::SpanMismatch(_))
        ));
    }

    #[test]
    fn full_rank_span_has_no_constraints() {
        let model = build_model(Scenario::chsh(), 1).unwrap();
        let mut sb = build_span(qubit_temporal(1), &model, 1, 0, 1).unwrap();
        for i in 0..sb.ambient {
            let mut e = vec![0.0; sb.ambient];
            e[i] = 1.0;
            sb.absorb(&e);
        }
        assert!(span_constraints(&sb, &model).unwrap().is_empty());
    }

    #[test]
    fn span_artifact_round_trip() {
        let model = build_model(Scenario::chsh(), 1).unwrap();
        let sb = build_span(qubit_temporal(1), &model, 2, 20, 40).unwrap();
        let mut buf = Vec::new();
        sb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], SPAN_MAGIC);
        let back = SpanBasis::read_from(buf.as_slice()).unwrap();
        assert_eq!(sb, back);
        let last = buf.len() - 1;
        buf[last] ^= 1;
        assert!(SpanBasis::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn fresh_samples_lie_in_span() {
        let model = build_model(Scenario::chsh(), 2).unwrap();
        for spec in [
            qubit_temporal(1),
            SampleSpec::new(2, RankSpec::Unconstrained, SamplingMode::Temporal),
            SampleSpec::new(2, RankSpec::Fixed(1), SamplingMode::Prepare),
        ] {
            let sb = build_span(spec, &model, 100, DEFAULT_BATCH, DEFAULT_MAX_BATCHES).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(u64::MAX - 1);
            for _ in 0..200 {
                let r = sample_with(&spec, &model.scenario(), &mut rng).unwrap();
                assert!(sb.residual(&moment_vector(&r, &model)) < 1e-6);
            }
        }
    }
}
