//! Descriptor fusion, cosine distance matrices, cross-platform retrieval
//! protocols, CMC / mAP metrics and the embedding file format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::memory::l2_norm;
use crate::scalar::Scalar;
use crate::synth::{Platform, Session, TrackletRecord};

/// `[v/‖v‖, h_M/‖h_M‖, f_S/‖f_S‖]`; a zero `f_S` stays zero.
pub fn fuse_descriptor<T: Scalar>(v: &[T], h_m: &[T], f_s: Option<&[T]>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(v.len() + h_m.len() + f_s.map_or(0, <[T]>::len));
    for (name, part) in [("v", v), ("h_M", h_m)] {
        let n = l2_norm(part);
        if n == T::zero() || !n.is_finite() {
            return Err(Error::ZeroNorm(format!("descriptor part {name}")));
        }
        out.extend(part.iter().map(|&x| x / n));
    }
    if let Some(f) = f_s {
        let n = l2_norm(f);
        if !n.is_finite() {
            return Err(Error::ZeroNorm("descriptor part f_S is not finite".into()));
        }
        if n == T::zero() {
            out.extend(f.iter().copied());
        } else {
            out.extend(f.iter().map(|&x| x / n));
        }
    }
    Ok(out)
}

/// `D[i, j] = 1 − cos(q_i, g_j)`.
pub fn distance_matrix<T: Scalar>(queries: &Mat<T>, gallery: &Mat<T>) -> Result<Mat<T>> {
    if queries.ncols() != gallery.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    let unit = |m: &Mat<T>| {
        let mut m = m.clone();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|x| x / n);
            }
        }
        m
    };
    let sims = unit(queries).dot(&unit(gallery).t());
    Ok(sims.mapv(|s| T::one() - s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    AerialToGround,
    GroundToAerial,
    AerialToAerial,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::AerialToGround,
        Protocol::GroundToAerial,
        Protocol::AerialToAerial,
    ];

    pub fn query_platform(self) -> Platform {
        match self {
            Protocol::AerialToGround | Protocol::AerialToAerial => Platform::Aerial,
            Protocol::GroundToAerial => Platform::Ground,
        }
    }

    pub fn gallery_platform(self) -> Platform {
        match self {
            Protocol::AerialToGround => Platform::Ground,
            Protocol::GroundToAerial | Protocol::AerialToAerial => Platform::Aerial,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::AerialToGround => "A->G",
            Protocol::GroundToAerial => "G->A",
            Protocol::AerialToAerial => "A->A",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Retrieval metadata carried by every descriptor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorMeta {
    pub tracklet_id: String,
    pub identity: u32,
    pub platform: Platform,
    pub session: Session,
}

impl From<&TrackletRecord> for DescriptorMeta {
    fn from(r: &TrackletRecord) -> Self {
        Self {
            tracklet_id: r.tracklet_id.clone(),
            identity: r.identity,
            platform: r.platform,
            session: r.session,
        }
    }
}

/// Query and gallery row indices for one protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Whether a query's own row must be skipped in its ranking.
    pub exclude_self: bool,
}

pub fn protocol_filter(meta: &[DescriptorMeta], protocol: Protocol) -> Result<ProtocolSplit> {
    let pick = |p: Platform| -> Vec<usize> { (0..meta.len()).filter(|&i| meta[i].platform == p).collect() };
    let queries = pick(protocol.query_platform());
    let gallery = pick(protocol.gallery_platform());
    if queries.is_empty() {
        return Err(Error::Empty(format!(
            "{protocol}: no {} queries",
            protocol.query_platform()
        )));
    }
    if gallery.is_empty() {
        return Err(Error::Empty(format!(
            "{protocol}: no {} gallery entries",
            protocol.gallery_platform()
        )));
    }
    Ok(ProtocolSplit {
        queries,
        gallery,
        exclude_self: protocol.query_platform() == protocol.gallery_platform(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `cmc[k]` is the match rate within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub ap: Vec<f64>,
    pub valid_queries: usize,
    pub dropped_queries: usize,
}

impl RetrievalMetrics {
    /// CMC at rank `k` (1-based); ranks past the gallery end saturate.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Per-query ranking by ascending distance (stable by gallery index).
/// `exclude[i]` removes one gallery column from query `i`'s list. Queries
/// with no positive are dropped from the averages.
pub fn cmc_map<T: Scalar>(
    dists: &Mat<T>,
    query_ids: &[u32],
    gallery_ids: &[u32],
    exclude: &[Option<usize>],
) -> Result<RetrievalMetrics> {
    let (nq, ng) = dists.dim();
    if query_ids.len() != nq || gallery_ids.len() != ng || exclude.len() != nq {
        return Err(Error::DimensionMismatch(format!(
            "{nq}×{ng} distances with {} query, {} gallery labels and {} exclusions",
            query_ids.len(),
            gallery_ids.len(),
            exclude.len()
        )));
    }
    let mut hits = vec![0usize; ng];
    let mut ap = Vec::with_capacity(nq);
    let mut dropped = 0;
    for i in 0..nq {
        let mut order: Vec<usize> = (0..ng).filter(|&j| exclude[i] != Some(j)).collect();
        order.sort_by(|&a, &b| {
            dists[[i, a]]
                .partial_cmp(&dists[[i, b]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first: Option<usize> = None;
        for (r, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[i] {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        match first {
            None => dropped += 1,
            Some(r) => {
                ap.push(precision_sum / found as f64);
                hits[r] += 1;
            }
        }
    }
    let valid = ap.len();
    let mut cmc = Vec::with_capacity(ng);
    let mut cum = 0;
    for h in hits {
        cum += h;
        cmc.push(if valid == 0 { 0.0 } else { cum as f64 / valid as f64 });
    }
    let map = if valid == 0 {
        0.0
    } else {
        ap.iter().sum::<f64>() / valid as f64
    };
    Ok(RetrievalMetrics {
        map,
        cmc,
        ap,
        valid_queries: valid,
        dropped_queries: dropped,
    })
}

/// Outcome of one protocol: metrics, or the reason it could not be scored.
#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolOutcome {
    Scored(RetrievalMetrics),
    Unavailable { reason: String, dropped_queries: usize },
}

impl ProtocolOutcome {
    pub fn map(&self) -> Option<f64> {
        match self {
            ProtocolOutcome::Scored(m) => Some(m.map),
            ProtocolOutcome::Unavailable { .. } => None,
        }
    }
}

pub fn evaluate_protocol<T: Scalar>(
    descriptors: &Mat<T>,
    meta: &[DescriptorMeta],
    protocol: Protocol,
) -> Result<ProtocolOutcome> {
    if descriptors.nrows() != meta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} descriptors but {} metadata rows",
            descriptors.nrows(),
            meta.len()
        )));
    }
    let split = match protocol_filter(meta, protocol) {
        Ok(s) => s,
        Err(e) => {
            return Ok(ProtocolOutcome::Unavailable {
                reason: e.to_string(),
                dropped_queries: 0,
            })
        }
    };
    let q = descriptors.select(ndarray::Axis(0), &split.queries);
    let g = descriptors.select(ndarray::Axis(0), &split.gallery);
    let d = distance_matrix(&q, &g)?;
    let qid: Vec<u32> = split.queries.iter().map(|&i| meta[i].identity).collect();
    let gid: Vec<u32> = split.gallery.iter().map(|&i| meta[i].identity).collect();
    let exclude: Vec<Option<usize>> = split
        .queries
        .iter()
        .map(|&qi| {
            if split.exclude_self {
                split.gallery.iter().position(|&gi| gi == qi)
            } else {
                None
            }
        })
        .collect();
    let m = cmc_map(&d, &qid, &gid, &exclude)?;
    if m.valid_queries == 0 {
        return Ok(ProtocolOutcome::Unavailable {
            reason: format!("{protocol}: no query has a matching gallery entry"),
            dropped_queries: m.dropped_queries,
        });
    }
    Ok(ProtocolOutcome::Scored(m))
}

/// Unweighted mean of the three protocol mAPs.
pub fn map3(maps: &[(Protocol, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for p in Protocol::ALL {
        let hits: Vec<f64> = maps.iter().filter(|(q, _)| *q == p).map(|&(_, m)| m).collect();
        match hits.as_slice() {
            [m] => total += m,
            [] => return Err(Error::InvalidArgument(format!("missing protocol {p}"))),
            _ => return Err(Error::InvalidArgument(format!("protocol {p} given twice"))),
        }
    }
    if maps.len() != 3 {
        return Err(Error::InvalidArgument("exactly three protocols required".into()));
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocols: Vec<(Protocol, ProtocolOutcome)>,
    pub map3: Option<f64>,
}

impl EvalReport {
    pub fn outcome(&self, p: Protocol) -> &ProtocolOutcome {
        &self
            .protocols
            .iter()
            .find(|(q, _)| *q == p)
            .expect("all protocols evaluated")
            .1
    }

    pub fn map(&self, p: Protocol) -> Option<f64> {
        self.outcome(p).map()
    }

    /// Aligned text table: protocol, mAP, R1, R5, R10.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8}{:>8}{:>8}{:>8}{:>8}\n", "protocol", "mAP", "R1", "R5", "R10");
        for (p, o) in &self.protocols {
            match o {
                ProtocolOutcome::Scored(m) => s.push_str(&format!(
                    "{:<8}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
                    p.name(),
                    100.0 * m.map,
                    100.0 * m.rank(1),
                    100.0 * m.rank(5),
                    100.0 * m.rank(10)
                )),
                ProtocolOutcome::Unavailable { dropped_queries, .. } => s.push_str(&format!(
                    "{:<8}{:>8}{:>8}{:>8}{:>8}  (dropped queries: {dropped_queries})\n",
                    p.name(),
                    "n/a",
                    "n/a",
                    "n/a",
                    "n/a"
                )),
            }
        }
        match self.map3 {
            Some(m) => s.push_str(&format!("{:<8}{:>8.2}\n", "mAP-3", 100.0 * m)),
            None => s.push_str(&format!("{:<8}{:>8}\n", "mAP-3", "n/a")),
        }
        s
    }

    /// `protocol metric value` lines.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for (p, o) in &self.protocols {
            match o {
                ProtocolOutcome::Scored(m) => {
                    for (name, v) in [
                        ("mAP", m.map),
                        ("R1", m.rank(1)),
                        ("R5", m.rank(5)),
                        ("R10", m.rank(10)),
                    ] {
                        s.push_str(&format!("{} {name} {v:.6}\n", p.name()));
                    }
                    s.push_str(&format!("{} dropped {}\n", p.name(), m.dropped_queries));
                }
                ProtocolOutcome::Unavailable { dropped_queries, .. } => {
                    s.push_str(&format!("{} mAP n/a\n", p.name()));
                    s.push_str(&format!("{} dropped {dropped_queries}\n", p.name()));
                }
            }
        }
        match self.map3 {
            Some(m) => s.push_str(&format!("all mAP-3 {m:.6}\n")),
            None => s.push_str("all mAP-3 n/a\n"),
        }
        s
    }
}

pub fn evaluate<T: Scalar>(descriptors: &Mat<T>, meta: &[DescriptorMeta]) -> Result<EvalReport> {
    let protocols = Protocol::ALL
        .iter()
        .map(|&p| Ok((p, evaluate_protocol(descriptors, meta, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let maps: Option<Vec<(Protocol, f64)>> = protocols.iter().map(|(p, o)| o.map().map(|m| (*p, m))).collect();
    let map3 = maps.map(|m| map3(&m)).transpose()?;
    Ok(EvalReport { protocols, map3 })
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SASD";

/// Descriptor matrix plus per-row metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub descriptors: Mat<f32>,
    pub meta: Vec<DescriptorMeta>,
}

impl EmbeddingSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.descriptors.dim();
        let mut out = Vec::with_capacity(12 + 4 * n * d);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.descriptors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.meta {
            out.extend_from_slice(
                format!("{} {} {} {}\n", m.tracklet_id, m.identity, m.platform, m.session).as_bytes(),
            );
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(err(0, "bad magic (expected SASD)".into()));
        }
        if bytes.len() < 12 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(err(8, "descriptor dimension is zero".into()));
        }
        let body = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| err(4, "count × dim overflows".into()))?;
        if bytes.len() < 12 + body {
            return Err(err(
                bytes.len(),
                format!("truncated body: header advertises {n}×{d} floats"),
            ));
        }
        let data: Vec<f32> = bytes[12..12 + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let descriptors = Mat::from_shape_vec((n, d), data).expect("sized body");
        let trailer_start = 12 + body;
        let trailer = std::str::from_utf8(&bytes[trailer_start..])
            .map_err(|e| err(trailer_start + e.valid_up_to(), "metadata trailer is not UTF-8".into()))?;
        let mut meta = Vec::with_capacity(n);
        let mut offset = trailer_start;
        for line in trailer.split_inclusive('\n') {
            let text = line.trim_end_matches('\n');
            if !text.is_empty() {
                let f: Vec<&str> = text.split(' ').collect();
                if f.len() != 4 {
                    return Err(err(
                        offset,
                        format!("metadata record has {} fields, expected 4", f.len()),
                    ));
                }
                let identity = f[1]
                    .parse()
                    .map_err(|_| err(offset, format!("bad identity {:?}", f[1])))?;
                let platform = f[2]
                    .parse()
                    .map_err(|_| err(offset, format!("bad platform {:?}", f[2])))?;
                let session = f[3]
                    .parse()
                    .map_err(|_| err(offset, format!("bad session {:?}", f[3])))?;
                meta.push(DescriptorMeta {
                    tracklet_id: f[0].to_string(),
                    identity,
                    platform,
                    session,
                });
            }
            offset += line.len();
        }
        if meta.len() != n {
            return Err(err(
                trailer_start,
                format!("{} metadata records for {n} rows", meta.len()),
            ));
        }
        Ok(Self { descriptors, meta })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.descriptors, &self.meta)
    }
}
