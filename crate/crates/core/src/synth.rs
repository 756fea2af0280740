//! Procedural aerial/ground, two-session video tracklet dataset.
//!
//! Every identity carries a clothing hue signature, persistent hair and skin
//! tones, a 10-d body shape latent that drives the rendered proportions, and
//! a gait frequency. The second session re-colors the clothing; the aerial
//! platform squashes the body vertically and blurs the frame.

use std::f32::consts::TAU;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::augment::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::rng::stream;

pub const SHAPE_DIM: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SHAPE_SIDECAR_EXT: &str = "shapes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Platform {
    Aerial,
    Ground,
}

impl Platform {
    pub const ALL: [Platform; 2] = [Platform::Aerial, Platform::Ground];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Aerial => "aerial",
            Platform::Ground => "ground",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aerial" => Ok(Platform::Aerial),
            "ground" => Ok(Platform::Ground),
            other => Err(format!("unknown platform `{other}`")),
        }
    }
}

/// Capture session; the second one changes clothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Session {
    First,
    Second,
}

impl Session {
    pub const ALL: [Session; 2] = [Session::First, Session::Second];

    pub fn number(self) -> u8 {
        match self {
            Session::First => 1,
            Session::Second => 2,
        }
    }
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Session {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Session::First),
            "2" => Ok(Session::Second),
            other => Err(format!("unknown session `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub platforms: Vec<Platform>,
    pub sessions: usize,
    pub tracklets_per_cell: usize,
    pub frames_per_tracklet: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub noise_std: f32,
    pub blur_aerial: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 16,
            platforms: Platform::ALL.to_vec(),
            sessions: 2,
            tracklets_per_cell: 2,
            frames_per_tracklet: 8,
            image_height: 56,
            image_width: 28,
            noise_std: 0.03,
            blur_aerial: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_identities < 2 {
            return bad(format!("num_identities = {} (need ≥ 2)", self.num_identities));
        }
        if self.platforms.is_empty() {
            return bad("no platforms".into());
        }
        let mut p = self.platforms.clone();
        p.sort();
        p.dedup();
        if p.len() != self.platforms.len() {
            return bad("duplicate platform".into());
        }
        if !(1..=2).contains(&self.sessions) {
            return bad(format!("sessions = {} (must be 1 or 2)", self.sessions));
        }
        if self.tracklets_per_cell == 0 || self.frames_per_tracklet == 0 {
            return bad("tracklets_per_cell and frames_per_tracklet must be positive".into());
        }
        if self.image_height < 8 || self.image_width < 4 {
            return bad(format!("image {}x{} too small", self.image_height, self.image_width));
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return bad(format!("noise_std {} outside [0, 1]", self.noise_std));
        }
        Ok(())
    }

    /// Additional constraints coming from the model that will consume the data.
    pub fn validate_for_model(&self, max_stride: usize, patch_size: usize) -> Result<()> {
        self.validate()?;
        if self.frames_per_tracklet < max_stride {
            return Err(Error::InvalidConfig(format!(
                "frames_per_tracklet {} < largest stride {}",
                self.frames_per_tracklet, max_stride
            )));
        }
        if patch_size == 0 || !self.image_height.is_multiple_of(patch_size) || !self.image_width.is_multiple_of(patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, patch_size
            )));
        }
        Ok(())
    }

    pub fn sessions(&self) -> &'static [Session] {
        &Session::ALL[..self.sessions]
    }

    pub fn num_tracklets(&self) -> usize {
        self.num_identities * self.platforms.len() * self.sessions * self.tracklets_per_cell
    }
}

/// One video tracklet. `identity` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletRecord {
    pub tracklet_id: String,
    pub identity: u32,
    pub platform: Platform,
    pub session: Session,
    /// Directory holding the frames, relative to the dataset root.
    pub frame_dir: String,
    pub shape_latent: [f32; SHAPE_DIM],
}

impl TrackletRecord {
    /// Zero-based class index.
    pub fn class(&self) -> usize {
        self.identity as usize - 1
    }

    /// Frame files in temporal order.
    pub fn frame_refs(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let dir = root.join(&self.frame_dir);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        Ok(files)
    }
}

/// Ground-truth generative attributes of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityProfile {
    pub identity: u32,
    /// Session-1 clothing hue, fraction of the hue circle.
    pub hue: f32,
    /// Clothing hue offset applied in session 2.
    pub session_hue_shift: f32,
    pub hair_value: f32,
    pub skin_value: f32,
    pub shape_latent: [f32; SHAPE_DIM],
    /// Gait angular frequency in radians per frame.
    pub gait_frequency: f32,
    /// Torso stripe period in pixels; the texture survives the session change.
    pub stripe_period: f32,
    /// Trouser hue and value; only the upper-body garment changes between sessions.
    pub pants_hue: f32,
    pub pants_value: f32,
}

impl IdentityProfile {
    pub fn clothing_hue(&self, session: Session) -> f32 {
        match session {
            Session::First => self.hue,
            Session::Second => (self.hue + self.session_hue_shift).rem_euclid(1.0),
        }
    }
}

const ID_STREAM: u64 = 1;
const TRACKLET_STREAM: u64 = 2;

/// Deterministic identity attributes. Hues are spread so that any two
/// identities differ by at least `1 / (2Y)` of the hue circle.
pub fn identity_profiles(config: &SynthConfig) -> Vec<IdentityProfile> {
    let y = config.num_identities;
    (0..y)
        .map(|i| {
            let mut rng = stream(config.seed, &[ID_STREAM, i as u64]);
            let jitter: f32 = rng.random_range(0.0..0.5);
            let hue = ((i as f32 + jitter) / y as f32).rem_euclid(1.0);
            let mut shape = [0f32; SHAPE_DIM];
            for s in shape.iter_mut() {
                *s = StandardNormal.sample(&mut rng);
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            IdentityProfile {
                identity: i as u32 + 1,
                hue,
                session_hue_shift: sign * rng.random_range(0.1..0.2),
                hair_value: rng.random_range(0.1..0.9),
                skin_value: rng.random_range(0.45..0.95),
                shape_latent: shape,
                gait_frequency: rng.random_range(0.5..1.5),
                stripe_period: rng.random_range(3.0..9.0),
                pants_hue: rng.random(),
                pants_value: rng.random_range(0.3..0.7),
            }
        })
        .collect()
}

struct TrackletScene {
    background_level: f32,
    background_hue: f32,
    texture_freq: (f32, f32),
    texture_phase: f32,
    offset: (f32, f32),
    gait_phase: f32,
    illumination: f32,
}

impl TrackletScene {
    fn sample<R: Rng>(rng: &mut R, session: Session) -> Self {
        Self {
            background_level: rng.random_range(0.42..0.58),
            background_hue: rng.random(),
            texture_freq: (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)),
            texture_phase: rng.random_range(0.0..TAU),
            offset: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            gait_phase: rng.random_range(0.0..TAU),
            illumination: match session {
                Session::First => rng.random_range(0.95..1.05),
                Session::Second => rng.random_range(0.82..0.95),
            },
        }
    }
}

/// Body geometry in pixels for one frame.
struct Body {
    cx: f32,
    head_r: f32,
    head_cy: f32,
    neck: f32,
    hip: f32,
    bottom: f32,
    shoulder_hw: f32,
    hip_hw: f32,
    leg_hw: [f32; 2],
    leg_gap: f32,
}

fn body_geometry(p: &IdentityProfile, scene: &TrackletScene, platform: Platform, t: usize, h: f32, w: f32) -> Body {
    let b = &p.shape_latent;
    let squash = match platform {
        Platform::Aerial => 0.78,
        Platform::Ground => 1.0,
    };
    let height = h * (0.82 + 0.08 * b[0].tanh());
    let head_r = height * (0.085 + 0.02 * b[3].tanh());
    let body_len = (height - 2.0 * head_r) * squash;
    let top = (h - (2.0 * head_r + body_len)) / 2.0 + scene.offset.1;
    let neck = top + 2.0 * head_r;
    let leg_frac = 0.46 + 0.07 * b[2].tanh();
    let hip = neck + body_len * (1.0 - leg_frac);
    let phase = p.gait_frequency * t as f32 + scene.gait_phase;
    let swing = 0.35 * phase.sin();
    let leg_base = w * (0.075 + 0.02 * b[5].tanh());
    Body {
        cx: w / 2.0 + scene.offset.0,
        head_r,
        head_cy: top + head_r,
        neck,
        hip,
        bottom: neck + body_len,
        shoulder_hw: w * (0.27 + 0.07 * b[1].tanh()),
        hip_hw: w * (0.2 + 0.05 * b[4].tanh()),
        leg_hw: [leg_base * (1.0 + swing), leg_base * (1.0 - swing)],
        leg_gap: w * (0.03 + 0.02 * (phase + 1.0).cos().abs()),
    }
}

fn shade(p: &IdentityProfile, body: &Body, session: Session, y: f32, x: f32) -> Option<[f32; 3]> {
    let dx = x - body.cx;
    // head
    let dy = y - body.head_cy;
    if dx * dx + dy * dy <= body.head_r * body.head_r {
        return Some(if y < body.head_cy - 0.1 * body.head_r {
            hsv_to_rgb([0.08, 0.35, p.hair_value])
        } else {
            hsv_to_rgb([0.07, 0.45, p.skin_value])
        });
    }
    let hue = p.clothing_hue(session);
    let period = p.stripe_period;
    if y >= body.neck && y < body.hip {
        let f = (y - body.neck) / (body.hip - body.neck).max(1e-3);
        let hw = body.shoulder_hw + (body.hip_hw - body.shoulder_hw) * f;
        if dx.abs() <= hw {
            let stripe = if ((y - body.neck) / period * TAU).sin() > 0.0 {
                0.85
            } else {
                0.62
            };
            return Some(hsv_to_rgb([hue, 0.75, stripe]));
        }
    }
    if y >= body.hip && y < body.bottom {
        let centers = [
            body.cx - body.leg_gap - body.leg_hw[0],
            body.cx + body.leg_gap + body.leg_hw[1],
        ];
        for (c, hw) in centers.iter().zip(body.leg_hw) {
            if (x - c).abs() <= hw {
                return Some(hsv_to_rgb([p.pants_hue, 0.6, p.pants_value]));
            }
        }
    }
    None
}

fn background(scene: &TrackletScene, y: f32, x: f32) -> [f32; 3] {
    let tex = 0.04 * (scene.texture_freq.0 * x + scene.texture_freq.1 * y + scene.texture_phase).sin();
    hsv_to_rgb([
        scene.background_hue,
        0.12,
        (scene.background_level + tex).clamp(0.0, 1.0),
    ])
}

/// Box-downscale by `factor`, then bilinear upscale back to the original size.
fn blur(frame: &Frame, factor: usize) -> Frame {
    if factor <= 1 {
        return frame.clone();
    }
    let sh = (frame.height / factor).max(1);
    let sw = (frame.width / factor).max(1);
    let mut small = Frame::new(sh, sw);
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = [0f32; 3];
            let mut n = 0.0;
            for yy in y * factor..((y + 1) * factor).min(frame.height) {
                for xx in x * factor..((x + 1) * factor).min(frame.width) {
                    let p = frame.pixel(yy, xx);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            small.set_pixel(y, x, acc.map(|v| v / n));
        }
    }
    let mut out = Frame::new(frame.height, frame.width);
    let sy = sh as f32 / frame.height as f32;
    let sx = sw as f32 / frame.width as f32;
    for y in 0..frame.height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..frame.width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let (a, b, c, d) = (
                small.pixel(y0, x0),
                small.pixel(y0, x1),
                small.pixel(y1, x0),
                small.pixel(y1, x1),
            );
            let mut px = [0f32; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bot = c[k] + (d[k] - c[k]) * tx;
                px[k] = top + (bot - top) * ty;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

fn render_tracklet<R: Rng>(
    config: &SynthConfig,
    profile: &IdentityProfile,
    platform: Platform,
    session: Session,
    rng: &mut R,
) -> Vec<Frame> {
    let (h, w) = (config.image_height, config.image_width);
    let scene = TrackletScene::sample(rng, session);
    let haze = match platform {
        Platform::Aerial => 0.06,
        Platform::Ground => 0.0,
    };
    (0..config.frames_per_tracklet)
        .map(|t| {
            let body = body_geometry(profile, &scene, platform, t, h as f32, w as f32);
            let mut frame = Frame::new(h, w);
            for y in 0..h {
                for x in 0..w {
                    // 2x2 supersampling
                    let mut acc = [0f32; 3];
                    for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                        let (py, px) = (y as f32 + oy, x as f32 + ox);
                        let c = shade(profile, &body, session, py, px).unwrap_or_else(|| background(&scene, py, px));
                        for k in 0..3 {
                            acc[k] += c[k] / 4.0;
                        }
                    }
                    frame.set_pixel(y, x, acc.map(|v| (v * scene.illumination + haze).min(1.0)));
                }
            }
            if platform == Platform::Aerial {
                frame = blur(&frame, config.blur_aerial + 1);
            }
            if config.noise_std > 0.0 {
                for v in frame.data.iter_mut() {
                    let n: f32 = StandardNormal.sample(rng);
                    *v = (*v + config.noise_std * n).clamp(0.0, 1.0);
                }
            }
            frame.quantized()
        })
        .collect()
}

pub fn tracklet_id(identity: u32, platform: Platform, session: Session, index: usize) -> String {
    format!("id{identity:04}_{platform}_s{session}_{index:02}")
}

/// A dataset held in memory: manifest records with their frames.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<TrackletRecord>,
    pub frames: Vec<Vec<Frame>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.records.iter().map(|r| r.identity as usize).max().unwrap_or(0)
    }

    /// Loads the manifest at `root/manifest.tsv` and all referenced frames.
    pub fn load(root: &Path) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST_FILE))?;
        let mut frames = Vec::with_capacity(records.len());
        for r in &records {
            let refs = r.frame_refs(root)?;
            if refs.is_empty() {
                return Err(Error::Empty(format!("tracklet {} has no frames", r.tracklet_id)));
            }
            let fs = refs.iter().map(|p| Frame::read_ppm(p)).collect::<Result<Vec<_>>>()?;
            frames.push(fs);
        }
        Ok(Self { records, frames })
    }
}

/// Renders the whole dataset in memory. Pure function of `config`.
pub fn generate_in_memory(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let profiles = identity_profiles(config);
    let mut records = Vec::with_capacity(config.num_tracklets());
    let mut frames = Vec::with_capacity(config.num_tracklets());
    for profile in &profiles {
        for &platform in &config.platforms {
            for &session in config.sessions() {
                for k in 0..config.tracklets_per_cell {
                    let mut rng = stream(
                        config.seed,
                        &[
                            TRACKLET_STREAM,
                            u64::from(profile.identity),
                            platform as u64,
                            u64::from(session.number()),
                            k as u64,
                        ],
                    );
                    let id = tracklet_id(profile.identity, platform, session, k);
                    frames.push(render_tracklet(config, profile, platform, session, &mut rng));
                    records.push(TrackletRecord {
                        frame_dir: format!("frames/{id}"),
                        tracklet_id: id,
                        identity: profile.identity,
                        platform,
                        session,
                        shape_latent: profile.shape_latent,
                    });
                }
            }
        }
    }
    Ok(Dataset { records, frames })
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:04}.ppm")
}

/// Renders the dataset and writes frames plus manifest under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    let data = generate_in_memory(config)?;
    write_dataset(&data, out_dir)?;
    Ok(data)
}

pub fn write_dataset(data: &Dataset, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    for (record, frames) in data.records.iter().zip(&data.frames) {
        let dir = out_dir.join(&record.frame_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (t, f) in frames.iter().enumerate() {
            f.write_ppm(&dir.join(frame_file_name(t)))?;
        }
    }
    write_manifest(&data.records, &out_dir.join(MANIFEST_FILE))
}

pub fn shape_sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension(SHAPE_SIDECAR_EXT)
}

/// Writes the tab-separated manifest and its shape-latent sidecar
/// (10 little-endian `f32` per identity, identities `1..=max` in order).
pub fn write_manifest(records: &[TrackletRecord], path: &Path) -> Result<()> {
    let mut text = Vec::new();
    for r in records {
        for field in [&r.tracklet_id, &r.frame_dir] {
            if field.contains(['\t', '\n']) {
                return Err(Error::InvalidArgument(format!(
                    "field `{field}` contains a tab or newline"
                )));
            }
        }
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}",
            r.tracklet_id, r.identity, r.platform, r.session, r.frame_dir
        )
        .expect("in-memory write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let max_id = records.iter().map(|r| r.identity).max().unwrap_or(0) as usize;
    let mut shapes = vec![[0f32; SHAPE_DIM]; max_id];
    for r in records {
        let slot = &mut shapes[r.class()];
        if *slot != [0.0; SHAPE_DIM] && *slot != r.shape_latent {
            return Err(Error::InvalidArgument(format!(
                "identity {} has inconsistent shape latents",
                r.identity
            )));
        }
        *slot = r.shape_latent;
    }
    let bytes: Vec<u8> = shapes.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    let sidecar = shape_sidecar_path(path);
    std::fs::write(&sidecar, bytes).map_err(|e| Error::io(format!("writing {}", sidecar.display()), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TrackletRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let sidecar = shape_sidecar_path(path);
    let shape_bytes = match std::fs::read(&sidecar) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && text.trim().is_empty() => Vec::new(),
        Err(e) => return Err(Error::io(format!("reading {}", sidecar.display()), e)),
    };
    let stride = SHAPE_DIM * 4;
    if shape_bytes.len() % stride != 0 {
        return Err(Error::Format {
            path: sidecar,
            offset: (shape_bytes.len() - shape_bytes.len() % stride) as u64,
            message: "trailing partial shape record".into(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let identity: u32 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad identity `{}`", fields[1])))?;
        if identity == 0 {
            return Err(err("identity labels start at 1".into()));
        }
        let platform = fields[2].parse::<Platform>().map_err(err)?;
        let session = fields[3].parse::<Session>().map_err(err)?;
        let offset = (identity as usize - 1) * stride;
        let chunk = shape_bytes
            .get(offset..offset + stride)
            .ok_or_else(|| err(format!("no shape latent for identity {identity} in sidecar")))?;
        let mut shape_latent = [0f32; SHAPE_DIM];
        for (k, b) in chunk.chunks_exact(4).enumerate() {
            shape_latent[k] = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        records.push(TrackletRecord {
            tracklet_id: fields[0].to_string(),
            identity,
            platform,
            session,
            frame_dir: fields[4].to_string(),
            shape_latent,
        });
    }
    Ok(records)
}

/// SHA-256 over the manifest, the shape sidecar and every frame file in
/// manifest order.
pub fn dataset_checksum(root: &Path) -> Result<String> {
    let manifest = root.join(MANIFEST_FILE);
    let mut hasher = Sha256::new();
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    hasher.update(read(&manifest)?);
    hasher.update(read(&shape_sidecar_path(&manifest))?);
    for r in read_manifest(&manifest)? {
        for f in r.frame_refs(root)? {
            hasher.update(read(&f)?);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 4,
            tracklets_per_cell: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn record_count_and_shape_consistency() {
        let data = generate_in_memory(&small()).unwrap();
        assert_eq!(data.records.len(), 48);
        for (r, f) in data.records.iter().zip(&data.frames) {
            assert_eq!(f.len(), 8);
            let same: Vec<_> = data.records.iter().filter(|o| o.identity == r.identity).collect();
            assert!(same.iter().all(|o| o.shape_latent == r.shape_latent));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_in_memory(&small()).unwrap();
        let b = generate_in_memory(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.frames, b.frames);
        let c = generate_in_memory(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn hue_signatures_are_spread() {
        for y in [2, 5, 32, 100] {
            let cfg = SynthConfig {
                num_identities: y,
                ..SynthConfig::default()
            };
            let p = identity_profiles(&cfg);
            for i in 0..y {
                for j in i + 1..y {
                    let d = (p[i].hue - p[j].hue).abs();
                    let circ = d.min(1.0 - d);
                    assert!(circ >= 1.0 / (2.0 * y as f32) - 1e-6, "Y={y} ids {i},{j}: {circ}");
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SynthConfig {
            num_identities: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig { sessions: 3, ..small() }.validate().is_err());
        assert!(small().validate_for_model(8, 14).is_ok());
        assert!(SynthConfig {
            frames_per_tracklet: 4,
            ..small()
        }
        .validate_for_model(8, 14)
        .is_err());
        assert!(SynthConfig {
            image_width: 30,
            ..small()
        }
        .validate_for_model(8, 14)
        .is_err());
    }

    #[test]
    fn identities_are_separable_in_pixel_space() {
        let cfg = SynthConfig {
            num_identities: 6,
            noise_std: 0.05,
            ..SynthConfig::default()
        };
        let data = generate_in_memory(&cfg).unwrap();
        let mean_frame: Vec<Vec<f32>> = data
            .frames
            .iter()
            .map(|fs| {
                let n = fs.len() as f32;
                (0..fs[0].data.len())
                    .map(|i| fs.iter().map(|f| f.data[i]).sum::<f32>() / n)
                    .collect()
            })
            .collect();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let d: f32 = mean_frame[i]
                    .iter()
                    .zip(&mean_frame[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                if data.records[i].identity == data.records[j].identity {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f32) < inter / nx as f32);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);

        write_manifest(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());

        let data = generate_in_memory(&small()).unwrap();
        write_manifest(&data.records, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), data.records);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen("\taerial\t", "\torbital\t", 1);
        std::fs::write(&path, &text).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("orbital"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "a\t1\tground\t3\tframes/a\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "a\t1\tground\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn on_disk_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_identities: 2,
            tracklets_per_cell: 1,
            ..SynthConfig::default()
        };
        let data = generate_dataset(&cfg, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.records, data.records);
        assert_eq!(loaded.frames, data.frames);
        let refs = data.records[0].frame_refs(dir.path()).unwrap();
        assert_eq!(refs.len(), cfg.frames_per_tracklet);
        assert!(refs[0].ends_with("0000.ppm"));

        let sum1 = dataset_checksum(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(sum1, dataset_checksum(dir2.path()).unwrap());
    }
}
