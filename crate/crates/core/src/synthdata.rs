//! Seeded synthetic source/target domains and the `.samples.csv` format.
//!
//! Each sample is drawn from a linear-Gaussian recipe
//!
//! ```text
//! x = R_domain · (Wᵀ a + u_id + c_cam + ε) + t_domain
//! ```
//!
//! where `a ∈ {0,1}^m` are the person-level attributes, `W` a fixed `m × d_in`
//! embedding, `u_id` a per-identity nuisance vector, `c_cam` a per-camera
//! offset (target only) and `ε` isotropic noise.
//!
//! Coordinates are split into a *content* block (the first `content_dim`
//! axes, where `W` lives) and a *style* block. Camera offsets and the target
//! translation live in the style block. The source domain uses `R = I,
//! t = 0`; the target rotates each content axis `i` into style axis `i` by
//! `shift_rotation_angle` and translates by `shift_translation_scale` per
//! style axis.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::Tensor;

pub const SAMPLES_EXT: &str = ".samples.csv";
const FIXED_COLUMNS: [&str; 5] = ["sample_id", "domain", "split", "person_id", "camera_id"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => DataError::Parse {
                line,
                msg: format!("expected {expected_len} fields, found {len}"),
            },
            other => DataError::Parse {
                line,
                msg: format!("{other:?}"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    /// Held-out labelled source samples.
    Test,
    Query,
    Gallery,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($ty).to_lowercase())),
                }
            }
        }
    };
}

str_enum!(Domain { Source => "source", Target => "target" });
str_enum!(Split { Train => "train", Test => "test", Query => "query", Gallery => "gallery" });

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub domain: Domain,
    pub split: Split,
    pub person_id: Option<u32>,
    pub camera_id: Option<u32>,
    pub attributes: Option<Vec<u8>>,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Attribute count.
    pub m: usize,
    pub d_in: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(m: usize, d_in: usize) -> Self {
        Self {
            m,
            d_in,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Subset holding only the given split, order preserved.
    pub fn split(&self, split: Split) -> Dataset {
        self.filter(|s| s.split == split)
    }

    pub fn filter(&self, pred: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            m: self.m,
            d_in: self.d_in,
            samples: self.samples.iter().filter(|s| pred(s)).cloned().collect(),
        }
    }

    /// Rows `idx` as an `n × d_in` matrix.
    pub fn features(&self, idx: &[usize]) -> Tensor<f32> {
        let data = idx
            .iter()
            .flat_map(|&i| self.samples[i].features.iter().copied())
            .collect();
        Tensor::new(&[idx.len(), self.d_in], data).expect("dataset features are finite")
    }

    pub fn all_features(&self) -> Tensor<f32> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features(&idx)
    }

    /// Attribute labels of rows `idx` as an `n × m` 0/1 matrix.
    pub fn labels(&self, idx: &[usize]) -> Result<Tensor<f32>, DataError> {
        let mut data = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            let s = &self.samples[i];
            let a = s
                .attributes
                .as_ref()
                .ok_or_else(|| DataError::Contract(format!("sample {} carries no attribute labels", s.sample_id)))?;
            data.extend(a.iter().map(|&v| f32::from(v)));
        }
        Ok(Tensor::new(&[idx.len(), self.m], data).expect("labels are finite"))
    }

    pub fn all_labelled(&self) -> bool {
        self.samples.iter().all(|s| s.attributes.is_some())
    }

    /// Drops every label, leaving only what unsupervised training may see.
    pub fn strip_labels(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            d_in: self.d_in,
            sample_ids: self.samples.iter().map(|s| s.sample_id).collect(),
            features: self.samples.iter().map(|s| s.features.clone()).collect(),
        }
    }
}

/// Target-domain training data: features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub d_in: usize,
    pub sample_ids: Vec<u64>,
    features: Vec<Vec<f32>>,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self, idx: &[usize]) -> Tensor<f32> {
        let data = idx.iter().flat_map(|&i| self.features[i].iter().copied()).collect();
        Tensor::new(&[idx.len(), self.d_in], data).expect("dataset features are finite")
    }
}

impl TryFrom<&Dataset> for UnlabeledDataset {
    type Error = DataError;

    /// Refuses datasets that still carry attribute labels.
    fn try_from(ds: &Dataset) -> Result<Self, DataError> {
        if let Some(s) = ds.samples.iter().find(|s| s.attributes.is_some()) {
            return Err(DataError::Contract(format!(
                "target sample {} exposes attribute labels to training",
                s.sample_id
            )));
        }
        Ok(ds.strip_labels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftSpec {
    pub m: usize,
    pub d_in: usize,
    /// Leading axes that carry attribute signal; the rest are style axes.
    pub content_dim: usize,
    pub shift_rotation_angle: f64,
    pub shift_translation_scale: f64,
    pub noise_sigma: f64,
    /// Spread of the per-identity nuisance vector.
    pub identity_sigma: f64,
    /// Spread of the per-camera offset in the target domain.
    pub camera_sigma: f64,
    pub n_source: usize,
    /// Fraction of source samples tagged [`Split::Test`].
    pub source_test_fraction: f64,
    /// Identities in the target query/gallery splits.
    pub n_identities: usize,
    /// Identities in the unlabelled target train split.
    pub n_train_identities: usize,
    pub samples_per_identity: usize,
    pub n_cameras: usize,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            m: 8,
            d_in: 32,
            content_dim: 16,
            shift_rotation_angle: 0.3,
            shift_translation_scale: 1.0,
            noise_sigma: 0.5,
            identity_sigma: 0.5,
            camera_sigma: 2.5,
            n_source: 2000,
            source_test_fraction: 0.2,
            n_identities: 100,
            n_train_identities: 800,
            samples_per_identity: 6,
            n_cameras: 3,
            seed: 0,
        }
    }
}

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Config(msg));
        if self.m == 0 || self.d_in == 0 {
            return fail(format!(
                "m and d_in must be positive (m={}, d_in={})",
                self.m, self.d_in
            ));
        }
        if self.content_dim == 0 || self.content_dim >= self.d_in {
            return fail(format!(
                "content_dim must be in [1, d_in), got {} with d_in={}",
                self.content_dim, self.d_in
            ));
        }
        if self.n_cameras < 2 {
            return fail(format!("n_cameras must be at least 2, got {}", self.n_cameras));
        }
        if self.samples_per_identity < 2 {
            return fail(format!(
                "samples_per_identity must be at least 2, got {}",
                self.samples_per_identity
            ));
        }
        if self.m < 63 && self.n_identities as u64 > 1u64 << self.m {
            return fail(format!(
                "{} identities cannot have distinct attribute vectors with m={}",
                self.n_identities, self.m
            ));
        }
        if !(0.0..1.0).contains(&self.source_test_fraction) {
            return fail(format!(
                "source_test_fraction must be in [0, 1), got {}",
                self.source_test_fraction
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("identity_sigma", self.identity_sigma),
            ("camera_sigma", self.camera_sigma),
            ("shift_translation_scale", self.shift_translation_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.shift_rotation_angle.is_finite() {
            return fail("shift_rotation_angle must be finite".into());
        }
        Ok(())
    }

    /// Number of query samples per evaluation identity.
    pub fn queries_per_identity(&self) -> usize {
        self.samples_per_identity.div_ceil(3)
    }
}

/// Fixed pieces of the generative model shared by both domains.
#[derive(Debug, Clone)]
pub struct LatentModel {
    /// `m × d_in`, row `j` is the direction of attribute `j`. Zero outside
    /// the content block.
    pub embedding: Vec<Vec<f64>>,
    /// Zero outside the style block.
    pub target_translation: Vec<f64>,
    pub rotation_angle: f64,
    pub content_dim: usize,
}

/// Latent factors of one sample before the domain transform.
#[derive(Debug, Clone)]
pub struct Latent {
    pub attributes: Vec<u8>,
    pub identity: Vec<f64>,
    pub camera: Vec<f64>,
    pub noise: Vec<f64>,
}

impl LatentModel {
    fn new(spec: &DomainShiftSpec) -> Self {
        let mut rng = stream(spec.seed, 0);
        let k = spec.content_dim;
        let embedding = (0..spec.m)
            .map(|_| {
                let mut row = normals(&mut rng, k, 1.0);
                row.resize(spec.d_in, 0.0);
                row
            })
            .collect();
        let mut target_translation = vec![0.0; k];
        target_translation.extend(normals(&mut rng, spec.d_in - k, spec.shift_translation_scale));
        Self {
            embedding,
            target_translation,
            rotation_angle: spec.shift_rotation_angle,
            content_dim: k,
        }
    }

    /// Maps latents to an observed feature vector in `domain`.
    pub fn embed(&self, latent: &Latent, domain: Domain) -> Vec<f32> {
        let d = self.target_translation.len();
        let k = self.content_dim;
        let mut z = vec![0.0f64; d];
        for (row, &a) in self.embedding.iter().zip(&latent.attributes) {
            if a == 1 {
                z.iter_mut().zip(row).for_each(|(zv, &w)| *zv += w);
            }
        }
        for (i, zv) in z.iter_mut().enumerate() {
            *zv += latent.identity[i] + latent.camera[i] + latent.noise[i];
        }
        if domain == Domain::Target {
            let (s, c) = self.rotation_angle.sin_cos();
            for i in 0..k.min(d - k) {
                let (x, y) = (z[i], z[k + i]);
                z[i] = c * x - s * y;
                z[k + i] = s * x + c * y;
            }
            z.iter_mut().zip(&self.target_translation).for_each(|(v, &t)| *v += t);
        }
        z.into_iter().map(|v| v as f32).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_attributes(rng: &mut ChaCha8Rng, m: usize) -> Vec<u8> {
    (0..m).map(|_| rng.gen_range(0..=1u8)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: Dataset,
    /// Full ground truth. Training code sees it only through
    /// [`Dataset::strip_labels`].
    pub target: Dataset,
}

impl DomainPair {
    pub fn target_train(&self) -> UnlabeledDataset {
        self.target.split(Split::Train).strip_labels()
    }

    /// Query and gallery samples, in generation order.
    pub fn target_eval(&self) -> Dataset {
        self.target.filter(|s| matches!(s.split, Split::Query | Split::Gallery))
    }
}

pub fn generate_pair(spec: &DomainShiftSpec) -> Result<DomainPair, DataError> {
    spec.validate()?;
    let model = LatentModel::new(spec);
    let mut next_id = 0u64;
    let mut fresh_id = || {
        next_id += 1;
        next_id - 1
    };

    let mut source = Dataset::new(spec.m, spec.d_in);
    let mut rng = stream(spec.seed, 1);
    let n_test = (spec.n_source as f64 * spec.source_test_fraction).round() as usize;
    let zero = vec![0.0; spec.d_in];
    for i in 0..spec.n_source {
        let latent = Latent {
            attributes: random_attributes(&mut rng, spec.m),
            identity: normals(&mut rng, spec.d_in, spec.identity_sigma),
            camera: zero.clone(),
            noise: normals(&mut rng, spec.d_in, spec.noise_sigma),
        };
        source.samples.push(Sample {
            sample_id: fresh_id(),
            domain: Domain::Source,
            split: if i < spec.n_source - n_test {
                Split::Train
            } else {
                Split::Test
            },
            person_id: None,
            camera_id: None,
            features: model.embed(&latent, Domain::Source),
            attributes: Some(latent.attributes),
        });
    }

    let mut rng = stream(spec.seed, 2);
    let cameras: Vec<Vec<f64>> = (0..spec.n_cameras)
        .map(|_| {
            let mut c = vec![0.0; spec.content_dim];
            c.extend(normals(&mut rng, spec.d_in - spec.content_dim, spec.camera_sigma));
            c
        })
        .collect();

    // Evaluation identities get distinct attribute vectors.
    let eval_attrs: Vec<Vec<u8>> = if spec.m <= 16 {
        let mut codes: Vec<u32> = (0..1u32 << spec.m).collect();
        codes.shuffle(&mut rng);
        codes[..spec.n_identities]
            .iter()
            .map(|&c| (0..spec.m).map(|j| ((c >> j) & 1) as u8).collect())
            .collect()
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(spec.n_identities);
        while out.len() < spec.n_identities {
            let a = random_attributes(&mut rng, spec.m);
            if seen.insert(a.clone()) {
                out.push(a);
            }
        }
        out
    };

    let mut target = Dataset::new(spec.m, spec.d_in);
    let nq = spec.queries_per_identity();
    let n_people = spec.n_train_identities + spec.n_identities;
    for pid in 0..n_people {
        let is_train = pid < spec.n_train_identities;
        let attributes = if is_train {
            random_attributes(&mut rng, spec.m)
        } else {
            eval_attrs[pid - spec.n_train_identities].clone()
        };
        let identity = normals(&mut rng, spec.d_in, spec.identity_sigma);
        let first_cam = rng.gen_range(0..spec.n_cameras);
        for k in 0..spec.samples_per_identity {
            let cam = (first_cam + k) % spec.n_cameras;
            let latent = Latent {
                attributes: attributes.clone(),
                identity: identity.clone(),
                camera: cameras[cam].clone(),
                noise: normals(&mut rng, spec.d_in, spec.noise_sigma),
            };
            let split = match (is_train, k < nq) {
                (true, _) => Split::Train,
                (false, true) => Split::Query,
                (false, false) => Split::Gallery,
            };
            target.samples.push(Sample {
                sample_id: fresh_id(),
                domain: Domain::Target,
                split,
                person_id: Some(pid as u32),
                camera_id: Some(cam as u32),
                features: model.embed(&latent, Domain::Target),
                attributes: Some(latent.attributes),
            });
        }
    }

    Ok(DomainPair { source, target })
}

/// Exposes the fixed generative pieces for a spec (for tests and docs).
pub fn latent_model(spec: &DomainShiftSpec) -> Result<LatentModel, DataError> {
    spec.validate()?;
    Ok(LatentModel::new(spec))
}

pub fn csv_header(m: usize, d_in: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..m).map(|j| format!("a_{j}")))
        .chain((0..d_in).map(|j| format!("x_{j}")))
        .collect()
}

pub fn write_csv_to<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(csv_header(ds.m, ds.d_in))?;
    for s in &ds.samples {
        if s.features.len() != ds.d_in {
            return Err(DataError::Format(format!(
                "sample {} has {} features, dataset declares {}",
                s.sample_id,
                s.features.len(),
                ds.d_in
            )));
        }
        let mut rec: Vec<String> = vec![
            s.sample_id.to_string(),
            s.domain.to_string(),
            s.split.to_string(),
            s.person_id.map_or("-1".into(), |p| p.to_string()),
            s.camera_id.map_or("-1".into(), |c| c.to_string()),
        ];
        match &s.attributes {
            Some(a) if a.len() == ds.m => rec.extend(a.iter().map(|v| v.to_string())),
            Some(a) => {
                return Err(DataError::Format(format!(
                    "sample {} has {} attributes, dataset declares {}",
                    s.sample_id,
                    a.len(),
                    ds.m
                )))
            }
            None => rec.extend(std::iter::repeat_n("-1".to_string(), ds.m)),
        }
        // `Display` for f32 prints the shortest string that round-trips.
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let f = std::fs::File::create(path)?;
    write_csv_to(ds, std::io::BufWriter::new(f))
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize), DataError> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..5] != FIXED_COLUMNS {
        return Err(DataError::Format(format!(
            "header must start with {}",
            FIXED_COLUMNS.join(",")
        )));
    }
    let m = cols[5..].iter().take_while(|c| c.starts_with("a_")).count();
    let d_in = cols.len() - 5 - m;
    if cols != csv_header(m, d_in) {
        return Err(DataError::Format(
            "attribute and feature columns must be a_0..a_{m-1} then x_0..x_{d-1}".into(),
        ));
    }
    Ok((m, d_in))
}

fn parse_opt_id(field: &str, line: u64, name: &str) -> Result<Option<u32>, DataError> {
    let v: i64 = field.parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("{name}: `{field}` is not an integer"),
    })?;
    match v {
        -1 => Ok(None),
        0..=0xFFFF_FFFF => Ok(Some(v as u32)),
        _ => Err(DataError::Parse {
            line,
            msg: format!("{name}: {v} out of range"),
        }),
    }
}

pub fn read_csv_from<R: Read>(input: R) -> Result<Dataset, DataError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let (m, d_in) = parse_header(&header)?;
    let mut ds = Dataset::new(m, d_in);
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: String| DataError::Parse { line, msg };
        let sample_id = rec[0]
            .parse::<u64>()
            .map_err(|_| err(format!("sample_id: `{}` is not an integer", &rec[0])))?;
        let domain = rec[1].parse::<Domain>().map_err(err)?;
        let split = rec[2].parse::<Split>().map_err(err)?;
        let person_id = parse_opt_id(&rec[3], line, "person_id")?;
        let camera_id = parse_opt_id(&rec[4], line, "camera_id")?;
        let raw_attrs: Vec<&str> = rec.iter().skip(5).take(m).collect();
        let attributes = if raw_attrs.iter().all(|&a| a == "-1") && m > 0 {
            None
        } else {
            let parsed = raw_attrs
                .iter()
                .map(|&a| match a {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(err(format!("attribute `{other}` is not 0, 1 or -1 for the whole row"))),
                })
                .collect::<Result<Vec<u8>, _>>()?;
            Some(parsed)
        };
        let features = rec
            .iter()
            .skip(5 + m)
            .map(|v| {
                v.parse::<f32>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("feature `{v}` is not a finite number")))
            })
            .collect::<Result<Vec<f32>, _>>()?;
        ds.samples.push(Sample {
            sample_id,
            domain,
            split,
            person_id,
            camera_id,
            attributes,
            features,
        });
    }
    Ok(ds)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    read_csv_from(std::io::BufReader::new(f))
}

/// Evaluation-side view of a target split with all labels blanked, as
/// written for training.
pub fn redact(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for s in &mut out.samples {
        s.person_id = None;
        s.camera_id = None;
        s.attributes = None;
    }
    out
}
