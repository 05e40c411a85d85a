//! Bit-exact persistence: the volume container, network and forest
//! checkpoints, output manifests, and contour overlay images.
//!
//! A volume is stored as a pair of files: `<base>.json`, a small header
//! (`{"magic":"CSEG","version":1,"dims":[...],"spacing_mm":[...],
//! "dtype":"i16"|"f32"|"u8","order":"x-fastest","endianness":"little"}`),
//! and `<base>.raw`, the little-endian payload in x-fastest order. Headers
//! and payloads are validated against each other on load and all errors
//! carry the byte offset they were detected at.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forest::{ForestMode, ForestModel, Node, Tree};
use crate::hnn::{HnnParams, NetConfig, Params};
use crate::volume::{Dtype, Element, Image2, Volume};

pub const VOLUME_MAGIC: &str = "CSEG";
pub const VOLUME_VERSION: u32 = 1;
const NET_MAGIC: &[u8; 8] = b"CSEGNET1";
const NET_VERSION: u32 = 1;
const FOREST_MAGIC: &[u8; 8] = b"CSEGFRST";
const FOREST_VERSION: u32 = 1;

/// Scalars with a defined little-endian wire encoding.
pub trait Scalar: Element {
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for i16 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes([bytes[0], bytes[1]])
    }
}

impl Scalar for u8 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Scalar for f32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    magic: String,
    version: u32,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: Dtype,
    order: String,
    endianness: String,
}

fn header_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn payload_path(base: &Path) -> PathBuf {
    base.with_extension("raw")
}

/// Write `<base>.json` and `<base>.raw`.
pub fn store_volume<T: Scalar>(vol: &Volume<T>, base: &Path) -> Result<()> {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let header = VolumeHeader {
        magic: VOLUME_MAGIC.to_string(),
        version: VOLUME_VERSION,
        dims: [dims.0, dims.1, dims.2],
        spacing_mm: [spacing.0, spacing.1, spacing.2],
        dtype: T::DTYPE,
        order: "x-fastest".to_string(),
        endianness: "little".to_string(),
    };
    if let Some(parent) = base.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(header_path(base), serde_json::to_vec(&header)?)?;
    let mut payload = Vec::with_capacity(vol.len() * T::DTYPE.byte_size());
    for &v in vol.data() {
        v.write_le(&mut payload);
    }
    fs::write(payload_path(base), payload)?;
    Ok(())
}

/// Load a volume stored by [`store_volume`]; the element type must match
/// the header's dtype.
pub fn load_volume<T: Scalar>(base: &Path) -> Result<Volume<T>> {
    let header_bytes = fs::read(header_path(base))?;
    let header: VolumeHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(0, format!("volume header: {e}")))?;
    if header.magic != VOLUME_MAGIC {
        return Err(Error::format(0, format!("bad magic '{}'", header.magic)));
    }
    if header.version != VOLUME_VERSION {
        return Err(Error::format(0, format!("unsupported version {}", header.version)));
    }
    if header.order != "x-fastest" || header.endianness != "little" {
        return Err(Error::format(
            0,
            format!("unsupported layout {}/{}", header.order, header.endianness),
        ));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            0,
            format!("dtype mismatch: header says {:?}, caller expects {:?}", header.dtype, T::DTYPE),
        ));
    }
    let n: usize = header.dims.iter().product();
    let elem = T::DTYPE.byte_size();
    let expected = n
        .checked_mul(elem)
        .ok_or_else(|| Error::format(0, "dims product overflows".to_string()))?;
    let payload = fs::read(payload_path(base))?;
    if payload.len() != expected {
        return Err(Error::format(
            payload.len().min(expected) as u64,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = T::read_le(&payload[i * elem..(i + 1) * elem]);
        if !v.check() {
            return Err(Error::format(
                (i * elem) as u64,
                "element violates the value invariant (non-finite or out of range)".to_string(),
            ));
        }
        data.push(v);
    }
    Volume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing_mm[0], header.spacing_mm[1], header.spacing_mm[2]),
        data,
    )
    .map_err(|e| Error::format(0, format!("header invariants: {e}")))
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.at as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Network checkpoint: magic, version, config JSON, then all tensors as
/// little-endian f32 in declared parameter order.
pub fn net_checkpoint_bytes(cfg: &NetConfig, params: &HnnParams) -> Result<Vec<u8>> {
    cfg.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(NET_MAGIC);
    push_u32(&mut out, NET_VERSION);
    let cfg_json = serde_json::to_vec(cfg)?;
    push_u32(&mut out, cfg_json.len() as u32);
    out.extend_from_slice(&cfg_json);
    push_u32(&mut out, params.n_params() as u32);
    params.for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

pub fn store_net(path: &Path, cfg: &NetConfig, params: &HnnParams) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, net_checkpoint_bytes(cfg, params)?)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<(NetConfig, HnnParams)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8, "magic")? != NET_MAGIC {
        return Err(Error::format(0, "bad network checkpoint magic".to_string()));
    }
    let version = r.u32("version")?;
    if version != NET_VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let at = r.at;
    let cfg: NetConfig = serde_json::from_slice(r.take(cfg_len, "config json")?)
        .map_err(|e| Error::format(at as u64, format!("config json: {e}")))?;
    cfg.validate().map_err(|e| Error::format(at as u64, e.to_string()))?;
    let mut params = Params::<f32>::zeros(&cfg).map_err(|e| Error::format(at as u64, e.to_string()))?;
    let declared = r.u32("tensor count")? as usize;
    if declared != params.n_params() {
        return Err(Error::format(
            r.at as u64,
            format!("checkpoint has {declared} parameters, config implies {}", params.n_params()),
        ));
    }
    let mut flat = Vec::with_capacity(declared);
    for i in 0..declared {
        let v = r.f32("tensor data")?;
        if !v.is_finite() {
            return Err(Error::format(
                (r.at - 4) as u64,
                format!("non-finite parameter at index {i}"),
            ));
        }
        flat.push(v);
    }
    if !r.done() {
        return Err(Error::format(r.at as u64, "trailing bytes after tensors".to_string()));
    }
    params.assign_flat(&flat);
    Ok((cfg, params))
}

/// Forest checkpoint: magic, version, mode, feature/output counts, seed,
/// then trees as flat node records (flag, feature u16, threshold f32, child
/// offsets u32, payload f32 x output_dim).
pub fn forest_checkpoint_bytes(model: &ForestModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FOREST_MAGIC);
    push_u32(&mut out, FOREST_VERSION);
    out.push(match model.mode {
        ForestMode::Classification => 0,
        ForestMode::Regression => 1,
    });
    out.extend_from_slice(&(model.n_features as u16).to_le_bytes());
    out.extend_from_slice(&(model.output_dim as u16).to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    push_u32(&mut out, model.trees.len() as u32);
    for tree in &model.trees {
        push_u32(&mut out, tree.nodes.len() as u32);
        for node in &tree.nodes {
            match node {
                Node::Split { feature, threshold, left, right } => {
                    out.push(0);
                    out.extend_from_slice(&feature.to_le_bytes());
                    out.extend_from_slice(&threshold.to_le_bytes());
                    push_u32(&mut out, *left);
                    push_u32(&mut out, *right);
                    for _ in 0..model.output_dim {
                        out.extend_from_slice(&0f32.to_le_bytes());
                    }
                }
                Node::Leaf { payload } => {
                    out.push(1);
                    out.extend_from_slice(&0u16.to_le_bytes());
                    out.extend_from_slice(&0f32.to_le_bytes());
                    push_u32(&mut out, 0);
                    push_u32(&mut out, 0);
                    for d in 0..model.output_dim {
                        out.extend_from_slice(&payload[d].to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

pub fn store_forest(path: &Path, model: &ForestModel) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, forest_checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<ForestModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8, "magic")? != FOREST_MAGIC {
        return Err(Error::format(0, "bad forest checkpoint magic".to_string()));
    }
    let version = r.u32("version")?;
    if version != FOREST_VERSION {
        return Err(Error::format(8, format!("unsupported forest version {version}")));
    }
    let mode = match r.u8("mode")? {
        0 => ForestMode::Classification,
        1 => ForestMode::Regression,
        other => return Err(Error::format((r.at - 1) as u64, format!("unknown mode {other}"))),
    };
    let n_features = r.u16("feature count")? as usize;
    let output_dim = r.u16("output dim")? as usize;
    if n_features == 0 || output_dim == 0 {
        return Err(Error::format(r.at as u64, "zero feature or output count".to_string()));
    }
    let seed = r.u64("seed")?;
    let n_trees = r.u32("tree count")? as usize;
    if n_trees == 0 || n_trees > 1_000_000 {
        return Err(Error::format(r.at as u64, format!("implausible tree count {n_trees}")));
    }
    let mut trees = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let n_nodes = r.u32("node count")? as usize;
        if n_nodes == 0 || n_nodes > 100_000_000 {
            return Err(Error::format(r.at as u64, format!("implausible node count {n_nodes} in tree {t}")));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let flag = r.u8("node flag")?;
            let feature = r.u16("feature index")?;
            let threshold = r.f32("threshold")?;
            let left = r.u32("left child")?;
            let right = r.u32("right child")?;
            let mut payload = Vec::with_capacity(output_dim);
            for _ in 0..output_dim {
                payload.push(r.f32("leaf payload")?);
            }
            let node = match flag {
                0 => {
                    if feature as usize >= n_features {
                        return Err(Error::format(
                            r.at as u64,
                            format!("feature index {feature} out of range in tree {t}"),
                        ));
                    }
                    if left as usize >= n_nodes || right as usize >= n_nodes || left as usize <= i || right as usize <= i {
                        return Err(Error::format(
                            r.at as u64,
                            format!("child offsets ({left},{right}) invalid at node {i} of tree {t}"),
                        ));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::format(r.at as u64, "non-finite threshold".to_string()));
                    }
                    Node::Split { feature, threshold, left, right }
                }
                1 => {
                    if payload.iter().any(|v| !v.is_finite()) {
                        return Err(Error::format(r.at as u64, "non-finite leaf payload".to_string()));
                    }
                    if mode == ForestMode::Classification && payload.iter().sum::<f32>() <= 0.0 {
                        return Err(Error::format(r.at as u64, "empty classification leaf".to_string()));
                    }
                    Node::Leaf { payload }
                }
                other => {
                    return Err(Error::format(r.at as u64, format!("unknown node flag {other}")));
                }
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    if !r.done() {
        return Err(Error::format(r.at as u64, "trailing bytes after trees".to_string()));
    }
    Ok(ForestModel { mode, n_features, output_dim, seed, trees })
}

/// Artifact manifest: relative path -> sha256 of the file contents.
#[derive(Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl Manifest {
    /// Hash `path` (relative to `root`) into the manifest.
    pub fn add(&mut self, root: &Path, relative: &str) -> Result<()> {
        let bytes = fs::read(root.join(relative))?;
        self.files.insert(relative.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let mut f = fs::File::create(root.join("manifest.json"))?;
        f.write_all(&serde_json::to_vec_pretty(self)?)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Manifest> {
        let bytes = fs::read(root.join("manifest.json"))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(0, format!("manifest: {e}")))
    }

    /// Re-hash every listed file and compare.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, expect) in &self.files {
            let bytes = fs::read(root.join(rel))?;
            let got = sha256_hex(&bytes);
            if &got != expect {
                return Err(Error::format(0, format!("{rel}: hash mismatch")));
            }
        }
        Ok(())
    }
}

/// In-slice boundary of a mask (pixels with a differing 4-neighbor).
fn contour(mask: &Image2<u8>) -> Vec<bool> {
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.at(x, y) == 0 {
                continue;
            }
            let edge = (x == 0 || mask.at(x - 1, y) == 0)
                || (x + 1 == w || mask.at(x + 1, y) == 0)
                || (y == 0 || mask.at(x, y - 1) == 0)
                || (y + 1 == h || mask.at(x, y + 1) == 0);
            out[x + w * y] = edge;
        }
    }
    out
}

/// Color overlay of one slice: windowed CT in gray, ground-truth contour in
/// red, prediction contour in green (binary P6).
pub fn write_overlay_ppm(
    path: &Path,
    ct: &Image2<u8>,
    gt: Option<&Image2<u8>>,
    pred: Option<&Image2<u8>>,
) -> Result<()> {
    let (w, h) = (ct.width, ct.height);
    for m in [gt, pred].into_iter().flatten() {
        if m.width != w || m.height != h {
            return Err(Error::invalid("overlay mask dims differ from the CT slice"));
        }
    }
    let gt_edge = gt.map(contour);
    let pred_edge = pred.map(contour);
    let mut body = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let g = ct.data[i];
        let mut px = [g, g, g];
        if gt_edge.as_ref().is_some_and(|e| e[i]) {
            px = [255, 40, 40];
        }
        if pred_edge.as_ref().is_some_and(|e| e[i]) {
            px = if gt_edge.as_ref().is_some_and(|e| e[i]) {
                [255, 220, 40] // both contours
            } else {
                [40, 255, 40]
            };
        }
        body.extend_from_slice(&px);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&body)?;
    Ok(())
}

/// Plain grayscale slice (binary P5).
pub fn write_pgm(path: &Path, img: &Image2<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}
