//! Plain-text dataset files: `#`-prefixed CSV headers, comma separators,
//! and `key = value` spec files. Floats are written in shortest round-trip
//! form, so writing and re-reading is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AifVector, TimeGrid};
use crate::phantom::{AifParams, PhantomDataset, PhantomSpec, Region, Shape};

pub const AIF_FILE: &str = "aif.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const CLEAN_FILE: &str = "meas_clean.csv";
pub const NOISY_FILE: &str = "meas_noisy.csv";
pub const SPEC_FILE: &str = "spec.txt";

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("not a number: `{}`", s.trim())))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{}`", s.trim())));
    }
    Ok(v)
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("not a count: `{}`", s.trim())))
}

fn parse_row(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',').map(|f| parse_f64(f, line)).collect()
}

/// `# <tag> k1=v1 k2=v2` header fields, checked against the expected tag.
fn parse_header<'a>(line: &'a str, tag: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let mut words = line
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, format!("missing `# {tag}` header")))?
        .split_whitespace();
    if words.next() != Some(tag) {
        return Err(parse_err(1, format!("expected `# {tag}` header")));
    }
    words
        .map(|w| {
            w.split_once('=')
                .ok_or_else(|| parse_err(1, format!("malformed header field `{w}`")))
        })
        .collect()
}

fn header_field<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| parse_err(1, format!("header lacks `{key}`")))
}

/// Non-empty data lines with 1-based line numbers, skipping the header.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Sampled arterial input curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AifFile {
    pub t_final: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl AifFile {
    pub fn from_vector(grid: &TimeGrid, aif: &AifVector) -> Self {
        Self {
            t_final: grid.t_final(),
            times: grid.abscissas(),
            values: aif.values().to_vec(),
        }
    }

    /// Values at the grid abscissas: copied when the samples sit exactly on
    /// them, interpolated monotonically otherwise.
    pub fn to_vector(&self, grid: &TimeGrid) -> Result<AifVector> {
        if self.times == grid.abscissas() {
            return AifVector::new(self.values.clone());
        }
        AifVector::from_samples(grid, &self.times, &self.values)
    }

    pub fn format(&self) -> String {
        let mut out = format!("# aif T={}\n", self.t_final);
        for (t, c) in self.times.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{c}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let header = parse_header(text.lines().next().unwrap_or(""), "aif")?;
        let t_final = parse_f64(header_field(&header, "T")?, 1)?;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (n, line) in data_lines(text) {
            match parse_row(line, n)?.as_slice() {
                [t, c] => {
                    times.push(*t);
                    values.push(*c);
                }
                _ => return Err(parse_err(n, "expected `t,c`")),
            }
        }
        Ok(Self {
            t_final,
            times,
            values,
        })
    }
}

/// Row-major `nx × ny` scalar map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Map {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::DimensionMismatch {
                expected: nx * ny,
                actual: values.len(),
            });
        }
        Ok(Self { nx, ny, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.nx + x]
    }

    pub fn format(&self, tag: &str) -> String {
        let mut out = format!("# {tag} nx={} ny={}\n", self.nx, self.ny);
        for row in self.values.chunks(self.nx.max(1)) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, tag: &str) -> Result<Self> {
        let header = parse_header(text.lines().next().unwrap_or(""), tag)?;
        let nx = parse_usize(header_field(&header, "nx")?, 1)?;
        let ny = parse_usize(header_field(&header, "ny")?, 1)?;
        let mut values = Vec::with_capacity(nx * ny);
        let mut rows = 0;
        for (n, line) in data_lines(text) {
            let row = parse_row(line, n)?;
            if row.len() != nx {
                return Err(parse_err(n, format!("expected {nx} values, got {}", row.len())));
            }
            values.extend(row);
            rows += 1;
        }
        if rows != ny {
            return Err(parse_err(1, format!("expected {ny} rows, got {rows}")));
        }
        Self::new(nx, ny, values)
    }
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// One measurement series per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub dt_obs: f64,
    pub n_obs: usize,
    pub rows: Vec<Vec<f64>>,
}

impl Measurements {
    pub fn new(dt_obs: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_obs = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != n_obs) {
            return Err(Error::DimensionMismatch {
                expected: n_obs,
                actual: r.len(),
            });
        }
        Ok(Self { dt_obs, n_obs, rows })
    }

    pub fn format(&self) -> String {
        let mut out = format!(
            "# meas n_voxel={} n_obs={} dt_obs={}\n",
            self.rows.len(),
            self.n_obs,
            self.dt_obs
        );
        for row in &self.rows {
            out.push_str(&join(row));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let header = parse_header(text.lines().next().unwrap_or(""), "meas")?;
        let n_voxel = parse_usize(header_field(&header, "n_voxel")?, 1)?;
        let n_obs = parse_usize(header_field(&header, "n_obs")?, 1)?;
        let dt_obs = parse_f64(header_field(&header, "dt_obs")?, 1)?;
        let mut rows = Vec::with_capacity(n_voxel);
        for (n, line) in data_lines(text) {
            let row = parse_row(line, n)?;
            if row.len() != n_obs {
                return Err(parse_err(n, format!("expected {n_obs} values, got {}", row.len())));
            }
            rows.push(row);
        }
        if rows.len() != n_voxel {
            return Err(parse_err(1, format!("expected {n_voxel} voxels, got {}", rows.len())));
        }
        Ok(Self { dt_obs, n_obs, rows })
    }
}

/// `key = value` lines; `#` starts a comment line. Keys may repeat.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(i + 1, format!("expected `key = value`, got `{line}`")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_spec(spec: &PhantomSpec) -> String {
    let mut s = String::new();
    let a = &spec.aif;
    let _ = writeln!(s, "nx = {}", spec.nx);
    let _ = writeln!(s, "ny = {}", spec.ny);
    let _ = writeln!(s, "background_perfusion = {}", spec.background_perfusion);
    let _ = writeln!(s, "background_mtt = {}", spec.background_mtt);
    let _ = writeln!(s, "aif_amplitude = {}", a.amplitude);
    let _ = writeln!(s, "aif_t0 = {}", a.t0);
    let _ = writeln!(s, "aif_a = {}", a.a);
    let _ = writeln!(s, "aif_b = {}", a.b);
    let _ = writeln!(s, "t_final = {}", spec.t_final);
    let _ = writeln!(s, "dt_obs = {}", spec.dt_obs);
    let _ = writeln!(s, "dtau = {}", spec.dtau);
    let _ = writeln!(s, "noise_variance = {}", spec.noise_variance);
    let _ = writeln!(s, "seed = {}", spec.seed);
    let _ = writeln!(s, "density = {}", spec.density);
    let _ = writeln!(s, "baseline = {}", spec.baseline);
    for r in &spec.regions {
        let shape = match r.shape {
            Shape::Disc { cx, cy, r } => format!("disc {cx} {cy} {r}"),
            Shape::Rect { x0, y0, x1, y1 } => format!("rect {x0} {y0} {x1} {y1}"),
        };
        let _ = writeln!(s, "region = {shape} {} {}", r.perfusion, r.mtt);
    }
    s
}

fn parse_region(v: &str, line: usize) -> Result<Region> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let (shape, rest) = match words.as_slice() {
        ["disc", cx, cy, r, rest @ ..] => (
            Shape::Disc {
                cx: parse_f64(cx, line)?,
                cy: parse_f64(cy, line)?,
                r: parse_f64(r, line)?,
            },
            rest,
        ),
        ["rect", x0, y0, x1, y1, rest @ ..] => (
            Shape::Rect {
                x0: parse_usize(x0, line)?,
                y0: parse_usize(y0, line)?,
                x1: parse_usize(x1, line)?,
                y1: parse_usize(y1, line)?,
            },
            rest,
        ),
        _ => return Err(parse_err(line, format!("bad region `{v}`"))),
    };
    match rest {
        [p, mtt] => Ok(Region {
            shape,
            perfusion: parse_f64(p, line)?,
            mtt: parse_f64(mtt, line)?,
        }),
        _ => Err(parse_err(line, "region needs `<perfusion> <mtt>` after the shape")),
    }
}

/// Reads a phantom spec; keys missing from the text keep their defaults.
pub fn parse_spec(text: &str) -> Result<PhantomSpec> {
    let mut spec = PhantomSpec::default();
    let mut aif = AifParams::default();
    for (n, key, v) in parse_key_values(text)? {
        match key.as_str() {
            "nx" => spec.nx = parse_usize(&v, n)?,
            "ny" => spec.ny = parse_usize(&v, n)?,
            "background_perfusion" => spec.background_perfusion = parse_f64(&v, n)?,
            "background_mtt" => spec.background_mtt = parse_f64(&v, n)?,
            "aif_amplitude" => aif.amplitude = parse_f64(&v, n)?,
            "aif_t0" => aif.t0 = parse_f64(&v, n)?,
            "aif_a" => aif.a = parse_f64(&v, n)?,
            "aif_b" => aif.b = parse_f64(&v, n)?,
            "t_final" => spec.t_final = parse_f64(&v, n)?,
            "dt_obs" => spec.dt_obs = parse_f64(&v, n)?,
            "dtau" => spec.dtau = parse_f64(&v, n)?,
            "noise_variance" => spec.noise_variance = parse_f64(&v, n)?,
            "seed" => spec.seed = v.parse().map_err(|_| parse_err(n, format!("bad seed `{v}`")))?,
            "density" => spec.density = parse_f64(&v, n)?,
            "baseline" => spec.baseline = parse_f64(&v, n)?,
            "region" => spec.regions.push(parse_region(&v, n)?),
            other => return Err(parse_err(n, format!("unknown key `{other}`"))),
        }
    }
    spec.aif = aif;
    Ok(spec)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Wraps a parse error with the file it came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, message } => Error::Io {
            path: path.display().to_string(),
            message: format!("line {line}: {message}"),
        },
        other => other,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    read(path)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write(path, contents)
}

/// Writes the four dataset files plus the spec echo into `dir`.
pub fn write_dataset(dir: &Path, data: &PhantomDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let spec = &data.spec;
    write(&dir.join(AIF_FILE), &AifFile::from_vector(&data.grid, &data.aif).format())?;
    let truth = Map::new(spec.nx, spec.ny, data.truth_map.clone())?;
    write(&dir.join(TRUTH_FILE), &truth.format("truth"))?;
    let dt = data.grid.dt_obs();
    write(&dir.join(CLEAN_FILE), &Measurements::new(dt, data.clean.clone())?.format())?;
    write(&dir.join(NOISY_FILE), &Measurements::new(dt, data.noisy.clone())?.format())?;
    write(&dir.join(SPEC_FILE), &format_spec(spec))
}

/// Dataset as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub spec: PhantomSpec,
    pub aif: AifFile,
    pub truth: Map,
    pub clean: Measurements,
    pub noisy: Measurements,
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let p = |name: &str| dir.join(name);
    let spec = in_file(&p(SPEC_FILE), parse_spec(&read(&p(SPEC_FILE))?))?;
    let aif = in_file(&p(AIF_FILE), AifFile::parse(&read(&p(AIF_FILE))?))?;
    let truth = in_file(&p(TRUTH_FILE), Map::parse(&read(&p(TRUTH_FILE))?, "truth"))?;
    let clean = in_file(&p(CLEAN_FILE), Measurements::parse(&read(&p(CLEAN_FILE))?))?;
    let noisy = in_file(&p(NOISY_FILE), Measurements::parse(&read(&p(NOISY_FILE))?))?;
    if noisy.rows.len() != truth.values.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.values.len(),
            actual: noisy.rows.len(),
        });
    }
    Ok(StoredDataset {
        spec,
        aif,
        truth,
        clean,
        noisy,
    })
}
