//! Volume files (native `.rvol` and a minimal NIfTI-1 subset), barcode JSON,
//! trajectory and metrics CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cubical_ph::{Barcode, PersistencePair};
use crate::error::{Error, FormatError, Result};
use crate::metrics::{CenterlineTruth, MetricReport};
use crate::refine::TrajectoryRecord;
use crate::volume::{Dims, Role, Volume, VoxelCoord};

pub const RVOL_MAGIC: [u8; 8] = *b"RVOL\r\n\x1a\n";
pub const RVOL_VERSION: u32 = 1;
const RVOL_HEADER_LEN: usize = 16 + 3 * 8 + 3 * 8;

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";

pub const TRAJECTORY_HEADER: &str = "i,beta0,l_cor,l_com_voxel,l_com_struct,l_total,ph_recomputed";
pub const METRICS_HEADER: &str = "case,cldice,nsdice,hd95,bd,td,betti0_err,flags";

/// On-disk sample type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn rvol_code(self) -> u8 {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 3,
            Dtype::F64 => 4,
        }
    }

    fn from_rvol_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => Dtype::U8,
            2 => Dtype::I16,
            3 => Dtype::F32,
            4 => Dtype::F64,
            other => return Err(FormatError::UnsupportedDtype(other as i32).into()),
        })
    }

    fn nifti_code(self) -> Option<i16> {
        match self {
            Dtype::U8 => Some(2),
            Dtype::I16 => Some(4),
            Dtype::F32 => Some(16),
            Dtype::F64 => None,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Dtype::U8,
            4 => Dtype::I16,
            16 => Dtype::F32,
            other => return Err(FormatError::UnsupportedDtype(other as i32).into()),
        })
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) -> Result<()> {
        out.reserve(values.len() * self.size());
        for &v in values {
            match self {
                Dtype::U8 => out.push(integral(v, 0.0, 255.0, "u8")? as u8),
                Dtype::I16 => out.extend_from_slice(&(integral(v, -32768.0, 32767.0, "i16")? as i16).to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        Ok(())
    }

    fn decode(self, bytes: &[u8], big_endian: bool) -> Vec<f64> {
        let chunks = bytes.chunks_exact(self.size());
        match self {
            Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
            Dtype::I16 => chunks
                .map(|c| {
                    let a = [c[0], c[1]];
                    (if big_endian { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }) as f64
                })
                .collect(),
            Dtype::F32 => chunks
                .map(|c| {
                    let a = [c[0], c[1], c[2], c[3]];
                    (if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }) as f64
                })
                .collect(),
            Dtype::F64 => chunks
                .map(|c| {
                    let a: [u8; 8] = c.try_into().unwrap();
                    if big_endian { f64::from_be_bytes(a) } else { f64::from_le_bytes(a) }
                })
                .collect(),
        }
    }
}

fn integral(v: f64, lo: f64, hi: f64, name: &str) -> Result<f64> {
    if v.fract() != 0.0 || v < lo || v > hi {
        return Err(Error::InvalidParameter(format!("value {v} is not representable as {name}")));
    }
    Ok(v)
}

fn role_code(role: Role) -> u8 {
    match role {
        Role::Probability => 0,
        Role::Logit => 1,
        Role::Binary => 2,
    }
}

fn role_from_code(code: u8) -> Result<Role> {
    Ok(match code {
        0 => Role::Probability,
        1 => Role::Logit,
        2 => Role::Binary,
        other => return Err(FormatError::MalformedHeader(format!("unknown role code {other}")).into()),
    })
}

/// Binary if every value is 0 or 1, probability if all lie in `[0, 1]`,
/// logit otherwise.
pub fn infer_role(values: &[f64]) -> Role {
    if values.iter().all(|v| *v == 0.0 || *v == 1.0) {
        Role::Binary
    } else if values.iter().all(|v| (0.0..=1.0).contains(v)) {
        Role::Probability
    } else {
        Role::Logit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Rvol,
    Nifti,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_ascii_lowercase();
    if name.ends_with(".nii.gz") || name.ends_with(".gz") {
        return Err(FormatError::CompressionUnsupported.into());
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("rvol") => Ok(Format::Rvol),
        Some("nii") => Ok(Format::Nifti),
        _ => Err(FormatError::UnsupportedExtension(path.to_path_buf()).into()),
    }
}

fn default_dtype(role: Role, format: Format) -> Dtype {
    match (role, format) {
        (Role::Binary, _) => Dtype::U8,
        (_, Format::Rvol) => Dtype::F64,
        (_, Format::Nifti) => Dtype::F32,
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Rvol => decode_rvol(&bytes),
        Format::Nifti => decode_nifti(&bytes),
    }
}

/// Writes `.rvol` as u8 (binary) or f64, `.nii` as u8 (binary) or f32.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dtype = default_dtype(v.role(), format_of(path)?);
    write_volume_as(v, path, dtype)
}

pub fn write_volume_as(v: &Volume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_of(path)? {
        Format::Rvol => encode_rvol(v, dtype)?,
        Format::Nifti => encode_nifti(v, dtype)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_rvol(v: &Volume, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(RVOL_HEADER_LEN + v.len() * dtype.size());
    out.extend_from_slice(&RVOL_MAGIC);
    out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
    out.push(dtype.rvol_code());
    out.push(role_code(v.role()));
    out.extend_from_slice(&[0, 0]);
    for n in v.dims().as_array() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    dtype.encode(v.data(), &mut out)?;
    Ok(out)
}

pub fn decode_rvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: RVOL_HEADER_LEN,
            found: bytes.len(),
        }
        .into());
    }
    if bytes[..8] != RVOL_MAGIC {
        return Err(FormatError::MalformedHeader("bad rvol magic".into()).into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != RVOL_VERSION {
        return Err(FormatError::MalformedHeader(format!("unsupported rvol version {version}")).into());
    }
    let dtype = Dtype::from_rvol_code(bytes[12])?;
    let role = role_from_code(bytes[13])?;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = usize::try_from(u64_at(16 + 8 * k))
            .map_err(|_| FormatError::MalformedHeader("dimension overflows usize".into()))?;
    }
    let spacing = [f64_at(40), f64_at(48), f64_at(56)];
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| FormatError::MalformedHeader("voxel count overflows".into()))?;
    let expected = count * dtype.size();
    let payload = &bytes[RVOL_HEADER_LEN..];
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    Volume::new(
        Dims::new(dims[0], dims[1], dims[2]),
        spacing,
        role,
        dtype.decode(payload, false),
    )
}

pub fn encode_nifti(v: &Volume, dtype: Dtype) -> Result<Vec<u8>> {
    let code = dtype.nifti_code().ok_or(FormatError::UnsupportedDtype(64))?;
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, x: i16| h[o..o + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, x: f32| h[o..o + 4].copy_from_slice(&x.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for (k, n) in v.dims().as_array().into_iter().enumerate() {
        let n = i16::try_from(n)
            .map_err(|_| FormatError::UnsupportedDimensionality(format!("dimension {n} exceeds NIfTI-1 limit")))?;
        put_i16(&mut h, 42 + 2 * k, n);
    }
    for k in 4..8 {
        put_i16(&mut h, 40 + 2 * k, 1);
    }
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for (k, s) in v.spacing().into_iter().enumerate() {
        put_f32(&mut h, 80 + 4 * k, s as f32);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2;
    h[344..348].copy_from_slice(NIFTI_MAGIC);
    dtype.encode(v.data(), &mut h)?;
    Ok(h)
}

pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(FormatError::CompressionUnsupported.into());
    }
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: NIFTI_HEADER_LEN,
            found: bytes.len(),
        }
        .into());
    }
    let big_endian = match bytes[0..4].try_into().unwrap() {
        a if i32::from_le_bytes(a) == NIFTI_HEADER_LEN as i32 => false,
        a if i32::from_be_bytes(a) == NIFTI_HEADER_LEN as i32 => true,
        _ => return Err(FormatError::MalformedHeader("sizeof_hdr is not 348".into()).into()),
    };
    if &bytes[344..348] != NIFTI_MAGIC {
        return Err(FormatError::MalformedHeader("not a single-file NIfTI-1 (magic n+1)".into()).into());
    }
    let i16_at = |o: usize| {
        let a = [bytes[o], bytes[o + 1]];
        if big_endian { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
        if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    };

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(FormatError::MalformedHeader(format!("dim[0] = {ndim}")).into());
    }
    let dim: Vec<i16> = (1..=ndim as usize).map(|k| i16_at(40 + 2 * k)).collect();
    if dim.iter().any(|&n| n < 1) {
        return Err(FormatError::MalformedHeader(format!("non-positive dimension in {dim:?}")).into());
    }
    if ndim > 4 || (ndim == 4 && dim[3] != 1) {
        return Err(FormatError::UnsupportedDimensionality(format!(
            "dims {dim:?}: only up to three spatial dimensions (plus a trailing unit dimension) are supported"
        ))
        .into());
    }
    let extent = |k: usize| dim.get(k).map_or(1, |&n| n as usize);
    let dims = Dims::new(extent(0), extent(1), extent(2));

    let dtype = Dtype::from_nifti_code(i16_at(70))?;
    // Unset pixdim entries (0) are read as unit spacing.
    let spacing_of = |k: usize| {
        let s = f32_at(80 + 4 * k).abs() as f64;
        if s > 0.0 && s.is_finite() { s } else { 1.0 }
    };
    let spacing = [spacing_of(0), spacing_of(1), spacing_of(2)];

    let offset = f32_at(108);
    if !(offset >= NIFTI_VOX_OFFSET as f32) || offset.fract() != 0.0 {
        return Err(FormatError::MalformedHeader(format!("vox_offset {offset}")).into());
    }
    let offset = offset as usize;
    let expected = dims.len() * dtype.size();
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(FormatError::Truncated {
            expected,
            found: available,
        }
        .into());
    }
    let mut data = dtype.decode(&bytes[offset..offset + expected], big_endian);
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            voxel: dims.coord(i),
            value: data[i],
        });
    }
    let role = infer_role(&data);
    Volume::new(dims, spacing, role, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarcodeEntry {
    pub dim: u8,
    pub birth: f64,
    pub death: f64,
    pub birth_voxel: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_voxel: Option<[usize; 3]>,
    pub essential: bool,
}

fn coord_array(v: VoxelCoord) -> [usize; 3] {
    [v.x, v.y, v.z]
}

fn array_coord(a: [usize; 3]) -> VoxelCoord {
    VoxelCoord::new(a[0], a[1], a[2])
}

impl From<&PersistencePair> for BarcodeEntry {
    fn from(p: &PersistencePair) -> Self {
        Self {
            dim: 0,
            birth: p.birth,
            death: p.death,
            birth_voxel: coord_array(p.birth_voxel),
            death_voxel: p.death_voxel.map(coord_array),
            essential: p.essential,
        }
    }
}

impl From<&BarcodeEntry> for PersistencePair {
    fn from(e: &BarcodeEntry) -> Self {
        Self {
            birth: e.birth,
            death: e.death,
            birth_voxel: array_coord(e.birth_voxel),
            death_voxel: e.death_voxel.map(array_coord),
            essential: e.essential,
        }
    }
}

pub fn barcode_to_json(b: &Barcode) -> String {
    let entries: Vec<BarcodeEntry> = b.pairs().iter().map(BarcodeEntry::from).collect();
    serde_json::to_string_pretty(&entries).expect("barcode entries serialize")
}

pub fn barcode_from_json(text: &str) -> Result<Barcode> {
    let entries: Vec<BarcodeEntry> = serde_json::from_str(text).map_err(|e| FormatError::Json(e.to_string()))?;
    if let Some(e) = entries.iter().find(|e| e.dim != 0) {
        return Err(FormatError::Json(format!("unsupported homology dimension {}", e.dim)).into());
    }
    Ok(Barcode::from_pairs(entries.iter().map(PersistencePair::from).collect()))
}

pub fn export_barcode(b: &Barcode, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &barcode_to_json(b))
}

/// `x` with 9 significant digits, in the style of C's `%.9g`.
pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn trajectory_csv(traj: &[TrajectoryRecord]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in traj {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            r.beta0,
            sig9(r.l_cor),
            sig9(r.l_com_voxel),
            sig9(r.l_com_struct),
            sig9(r.l_total),
            u8::from(r.ph_recomputed)
        ));
    }
    out
}

pub fn export_trajectory(traj: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &trajectory_csv(traj))
}

/// One CSV row per `(case id, report)`; flags are `;`-separated.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (case, m) in rows {
        let flags: Vec<String> = m.flags.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_field(case),
            sig9(m.cldice_pct),
            sig9(m.nsdice_pct),
            sig9(m.hd95_mm),
            sig9(m.bd_pct),
            sig9(m.td_pct),
            m.betti0_error,
            flags.join(";")
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn export_metrics<'a>(
    rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_text(path.as_ref(), &metrics_csv(rows))
}

pub fn write_centerline(c: &CenterlineTruth, path: impl AsRef<Path>) -> Result<()> {
    write_json(c, path)
}

pub fn read_centerline(path: impl AsRef<Path>) -> Result<CenterlineTruth> {
    read_json(path)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FormatError::Json(e.to_string()))?;
    write_text(path.as_ref(), &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Json(format!("{}: {e}", path.display())).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    if !text.ends_with('\n') {
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
