//! Federations of owners, users and records, plus synthetic task generators.
//!
//! Owner `j` holds `m` records split into `r` contiguous user shards of
//! `m / r` records each. Records are flat `f64` vectors whose layout depends
//! on the task:
//!
//! * shared mean: `[z_x (k), z_u (ell)]`
//! * logistic:    `[a (k), b (ell), y]` with `y ∈ {−1, +1}`

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{norm, project_ball, DomainSpec};
use crate::error::{check_dim, config_err, Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Owners.
    pub n: usize,
    /// Records per owner.
    pub m: usize,
    /// Users per owner.
    pub r: usize,
    pub record_dim: usize,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(config_err("problem: n and m must be at least 1"));
        }
        if self.r == 0 || !self.m.is_multiple_of(self.r) {
            return Err(config_err(format!(
                "problem: r = {} must divide m = {}",
                self.r, self.m
            )));
        }
        if self.record_dim == 0 {
            return Err(config_err("problem: record_dim must be at least 1"));
        }
        Ok(())
    }

    /// Records per user, `m / r`.
    pub fn shard_size(&self) -> usize {
        self.m / self.r
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    SharedMean,
    Logistic,
}

/// Data distributions `P_j` with a common shared optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// One center `p_j ∈ R^k` per owner.
    pub personalized_centers: Vec<Vec<f64>>,
    /// Shared center `q ∈ R^ell`.
    pub shared_center: Vec<f64>,
    /// Per-coordinate standard deviation of the data noise.
    pub noise_scale: f64,
    pub heterogeneity: f64,
    /// Norm bound on logistic features `(a, b)`.
    pub feature_bound: f64,
}

impl SyntheticTask {
    /// Shared-mean task. Owner centers sit on a sphere of radius
    /// `heterogeneity·d_x/2` around a common draw, the shared center at
    /// distance `center_frac·d_u/2` from the origin in a random direction.
    pub fn shared_mean(domain: &DomainSpec, noise_scale: f64, heterogeneity: f64, center_frac: f64, seed: u64) -> Result<Self> {
        let (personalized_centers, shared_center) = place_centers(domain, heterogeneity, center_frac, seed)?;
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(config_err(format!("task: noise_scale must be >= 0, got {noise_scale}")));
        }
        Ok(Self {
            kind: TaskKind::SharedMean,
            personalized_centers,
            shared_center,
            noise_scale,
            heterogeneity,
            feature_bound: 1.0,
        })
    }

    /// Logistic task whose labels come from a teacher `(p_j, q)`.
    pub fn logistic(domain: &DomainSpec, heterogeneity: f64, center_frac: f64, feature_bound: f64, seed: u64) -> Result<Self> {
        let (personalized_centers, shared_center) = place_centers(domain, heterogeneity, center_frac, seed)?;
        if !(feature_bound.is_finite() && feature_bound > 0.0) {
            return Err(config_err("task: feature_bound must be > 0"));
        }
        Ok(Self {
            kind: TaskKind::Logistic,
            personalized_centers,
            shared_center,
            noise_scale: 0.0,
            heterogeneity,
            feature_bound,
        })
    }

    pub fn n(&self) -> usize {
        self.personalized_centers.len()
    }

    pub fn k(&self) -> usize {
        self.personalized_centers.first().map_or(0, Vec::len)
    }

    pub fn ell(&self) -> usize {
        self.shared_center.len()
    }

    pub fn record_dim(&self) -> usize {
        match self.kind {
            TaskKind::SharedMean => self.k() + self.ell(),
            TaskKind::Logistic => self.k() + self.ell() + 1,
        }
    }

    /// Radial clip applied to a noise block of dimension `dim`.
    pub fn noise_clip(&self, dim: usize) -> f64 {
        4.0 * self.noise_scale * (dim as f64).sqrt()
    }

    /// Upper bound on the norm of any record this task can produce.
    pub fn record_bound(&self) -> f64 {
        match self.kind {
            TaskKind::SharedMean => {
                let px = self.personalized_centers.iter().map(|p| norm(p)).fold(0.0, f64::max);
                let bx = px + self.noise_clip(self.k());
                let bu = norm(&self.shared_center) + self.noise_clip(self.ell());
                (bx * bx + bu * bu).sqrt()
            }
            TaskKind::Logistic => (self.feature_bound * self.feature_bound + 1.0).sqrt(),
        }
    }

    /// Draw one record of owner `owner`.
    pub fn sample_record(&self, owner: usize, rng: &mut StreamRng) -> Vec<f64> {
        let k = self.k();
        let ell = self.ell();
        match self.kind {
            TaskKind::SharedMean => {
                let mut z = Vec::with_capacity(k + ell);
                z.extend_from_slice(&self.personalized_centers[owner]);
                z.extend_from_slice(&self.shared_center);
                if self.noise_scale > 0.0 {
                    add_clipped_noise(&mut z[..k], self.noise_scale, self.noise_clip(k), rng);
                    add_clipped_noise(&mut z[k..], self.noise_scale, self.noise_clip(ell), rng);
                }
                z
            }
            TaskKind::Logistic => {
                let dim = k + ell;
                let scale = 1.0 / (dim as f64).sqrt();
                let mut z: Vec<f64> = (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                project_ball(&mut z, self.feature_bound);
                let margin = crate::domain::dot(&z[..k], &self.personalized_centers[owner])
                    + crate::domain::dot(&z[k..], &self.shared_center);
                let p_pos = 1.0 / (1.0 + (-margin).exp());
                let y = if rng.random::<f64>() < p_pos { 1.0 } else { -1.0 };
                z.push(y);
                z
            }
        }
    }
}

fn place_centers(domain: &DomainSpec, heterogeneity: f64, center_frac: f64, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    domain.validate()?;
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(config_err(format!("task: heterogeneity must lie in [0, 1], got {heterogeneity}")));
    }
    if !(0.0..=1.0).contains(&center_frac) {
        return Err(config_err(format!("task: center fraction must lie in [0, 1], got {center_frac}")));
    }
    let mut rng = rng::stream(rng::derive(seed, 0xCE17));
    let rx = domain.x_radius();
    let common = random_in_ball(domain.k, (1.0 - heterogeneity) * rx, &mut rng);
    let personalized = (0..domain.n)
        .map(|_| {
            let dir = random_unit(domain.k, &mut rng);
            common
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + heterogeneity * rx * d)
                .collect()
        })
        .collect();
    let dir = random_unit(domain.ell, &mut rng);
    let shared = dir.iter().map(|d| center_frac * domain.u_radius() * d).collect();
    Ok((personalized, shared))
}

fn random_unit(dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let nrm = norm(&v);
        if nrm > 1e-12 {
            return v.into_iter().map(|c| c / nrm).collect();
        }
    }
}

fn random_in_ball(dim: usize, radius: f64, rng: &mut StreamRng) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let dir = random_unit(dim, rng);
    let rad = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|c| c * rad).collect()
}

/// Add `N(0, scale²I)` noise radially clipped to norm `clip`.
fn add_clipped_noise(block: &mut [f64], scale: f64, clip: f64, rng: &mut StreamRng) {
    let mut noise: Vec<f64> = (0..block.len())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    project_ball(&mut noise, clip);
    for (b, e) in block.iter_mut().zip(&noise) {
        *b += e;
    }
}

/// The dataset `S = {S_j}`; each owner holds `m` records in `r` user shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub m: usize,
    pub r: usize,
    pub dim: usize,
    pub shards: Vec<Vec<Vec<f64>>>,
}

impl Federation {
    pub fn new(r: usize, shards: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let m = shards.first().map_or(0, Vec::len);
        let dim = shards.first().and_then(|s| s.first()).map_or(0, Vec::len);
        let fed = Self { m, r, dim, shards };
        fed.validate()?;
        Ok(fed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shards.is_empty() || self.m == 0 || self.dim == 0 {
            return Err(config_err("federation must have at least one owner and one record"));
        }
        if self.r == 0 || !self.m.is_multiple_of(self.r) {
            return Err(config_err(format!("federation: r = {} must divide m = {}", self.r, self.m)));
        }
        for s in &self.shards {
            check_dim("records per owner", self.m, s.len())?;
            for z in s {
                check_dim("record", self.dim, z.len())?;
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.shards.len()
    }

    /// Records per user, `m / r`.
    pub fn shard_size(&self) -> usize {
        self.m / self.r
    }

    /// User index of record `i` of any owner (users hold contiguous shards).
    pub fn user_of(&self, i: usize) -> usize {
        i / self.shard_size()
    }

    /// Records of user `w` of owner `j`.
    pub fn user_records(&self, j: usize, w: usize) -> &[Vec<f64>] {
        let s = self.shard_size();
        &self.shards[j][w * s..(w + 1) * s]
    }

    pub fn record(&self, j: usize, i: usize) -> &[f64] {
        &self.shards[j][i]
    }

    pub fn records(&self) -> impl Iterator<Item = &[f64]> {
        self.shards.iter().flatten().map(Vec::as_slice)
    }

    /// Number of record positions at which two equally shaped federations differ.
    pub fn record_hamming(&self, other: &Self) -> usize {
        self.shards
            .iter()
            .zip(&other.shards)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum()
    }

    /// Serialize as one `owner_id,user_id,v1,..,vd` line per record after a
    /// two-line header.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# jointdp federation v1")?;
        writeln!(w, "# n={} m={} r={} d={}", self.n(), self.m, self.r, self.dim)?;
        let mut line = String::new();
        for (j, shard) in self.shards.iter().enumerate() {
            for (i, z) in shard.iter().enumerate() {
                line.clear();
                let _ = write!(line, "{},{}", j, self.user_of(i));
                for v in z {
                    let _ = write!(line, ",{v}");
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("federation text is ASCII")
    }

    /// Parse the text format and check every invariant.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut header: Option<(usize, usize, usize, usize)> = None;
        let mut shards: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut users: Vec<Vec<usize>> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if rest.contains("n=") {
                    header = Some(parse_header(rest, lineno)?);
                    let (n, _, _, _) = header.unwrap();
                    shards = vec![Vec::new(); n];
                    users = vec![Vec::new(); n];
                }
                continue;
            }
            let (n, _, _, d) = header.ok_or(Error::Parse {
                line: lineno,
                msg: "record before header".into(),
            })?;
            let mut fields = t.split(',');
            let parse_usize = |s: Option<&str>, what: &str| -> Result<usize> {
                s.and_then(|v| v.trim().parse().ok()).ok_or(Error::Parse {
                    line: lineno,
                    msg: format!("bad {what}"),
                })
            };
            let owner = parse_usize(fields.next(), "owner id")?;
            let user = parse_usize(fields.next(), "user id")?;
            if owner >= n {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("owner id {owner} >= n = {n}"),
                });
            }
            let z = fields
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            if z.len() != d {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {d} values, got {}", z.len()),
                });
            }
            shards[owner].push(z);
            users[owner].push(user);
        }
        let (_, m, r, _) = header.ok_or(Error::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        let fed = Self {
            m,
            r,
            dim: header.unwrap().3,
            shards,
        };
        fed.validate()?;
        for owner_users in &users {
            for (i, &w) in owner_users.iter().enumerate() {
                if w != fed.user_of(i) {
                    return Err(config_err(format!(
                        "record {i} assigned to user {w}, expected {}",
                        fed.user_of(i)
                    )));
                }
            }
        }
        Ok(fed)
    }
}

fn parse_header(rest: &str, line: usize) -> Result<(usize, usize, usize, usize)> {
    let mut vals = [None; 4];
    for tok in rest.split_whitespace() {
        let Some((key, v)) = tok.split_once('=') else { continue };
        let slot = match key {
            "n" => 0,
            "m" => 1,
            "r" => 2,
            "d" => 3,
            _ => continue,
        };
        vals[slot] = v.parse::<usize>().ok();
    }
    match vals {
        [Some(n), Some(m), Some(r), Some(d)] => Ok((n, m, r, d)),
        _ => Err(Error::Parse {
            line,
            msg: "header must define n, m, r and d".into(),
        }),
    }
}

/// Draw a federation: `m` i.i.d. records per owner from the task.
pub fn generate(task: &SyntheticTask, spec: &ProblemSpec) -> Result<Federation> {
    spec.validate()?;
    check_dim("task owners", spec.n, task.n())?;
    check_dim("record_dim", task.record_dim(), spec.record_dim)?;
    let mut rng = rng::stream(spec.seed);
    let shards = (0..spec.n)
        .map(|j| (0..spec.m).map(|_| task.sample_record(j, &mut rng)).collect())
        .collect();
    Ok(Federation {
        m: spec.m,
        r: spec.r,
        dim: spec.record_dim,
        shards,
    })
}

/// Record-level neighbor: record `i` of owner `j` replaced by `fresh`.
pub fn replace_record(fed: &Federation, owner: usize, index: usize, fresh: Vec<f64>) -> Result<Federation> {
    if owner >= fed.n() {
        return Err(Error::Index {
            what: "owner",
            index: owner,
            limit: fed.n(),
        });
    }
    if index >= fed.m {
        return Err(Error::Index {
            what: "record",
            index,
            limit: fed.m,
        });
    }
    check_dim("fresh record", fed.dim, fresh.len())?;
    let mut out = fed.clone();
    out.shards[owner][index] = fresh;
    Ok(out)
}

/// User-level neighbor: all `m / r` records of user `user` of owner `owner`
/// replaced by `fresh_shard`.
pub fn replace_user(fed: &Federation, owner: usize, user: usize, fresh_shard: Vec<Vec<f64>>) -> Result<Federation> {
    if owner >= fed.n() {
        return Err(Error::Index {
            what: "owner",
            index: owner,
            limit: fed.n(),
        });
    }
    if user >= fed.r {
        return Err(Error::Index {
            what: "user",
            index: user,
            limit: fed.r,
        });
    }
    check_dim("user shard length", fed.shard_size(), fresh_shard.len())?;
    for z in &fresh_shard {
        check_dim("fresh record", fed.dim, z.len())?;
    }
    let s = fed.shard_size();
    let mut out = fed.clone();
    for (slot, z) in out.shards[owner][user * s..(user + 1) * s].iter_mut().zip(fresh_shard) {
        *slot = z;
    }
    Ok(out)
}
