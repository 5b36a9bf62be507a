//! Binary dataset and checkpoint files, and JSON reports.
//!
//! All integers are unsigned 32-bit and all reals 64-bit IEEE-754, both
//! little-endian. Writers go through a temporary file in the destination
//! directory and an atomic rename. See `docs/formats.md` for the layouts.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::domain::{BoundingBox, CenterPlaneMesh, FieldSnapshot, InputRanges, InputSample};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelConfig, ModelParams, Network, NormalizationStats};
use crate::numerics::DenseMatrix;
use crate::oracle::{Dataset, GeometrySpec};

pub const DATASET_MAGIC: &[u8; 8] = b"MIODS001";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIOCK001";

/// Fixed dataset header size: magic, four counts, six range bounds, seed,
/// three geometry constants.
pub const DATASET_HEADER_LEN: u64 = 8 + 4 * 4 + 6 * 8 + 8 + 3 * 8;

/// Byte length of a dataset file with the given header counts.
pub fn dataset_file_len(n_samples: u64, n1: u64, n_nodes: u64, n_scalar: u64) -> u64 {
    DATASET_HEADER_LEN + 3 * 8 * n_nodes + n_samples * 8 * (n1 + n_scalar + 3 * n_nodes)
}

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn count(&mut self, what: &str, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::invalid(format!("{what} = {n} does not fit in 32 bits")))?;
        self.buf.extend_from_slice(&n.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Decoder<'a> {
    what: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(what: &'static str, data: &'a [u8]) -> Self {
        Self { what, data, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        self.err_at(self.pos, message)
    }

    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} more bytes, only {} remain (file is {} bytes)",
                self.data.len() - self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8)?;
        if found != expected {
            return Err(self.err_at(
                0,
                format!(
                    "bad magic: expected \"{}\", found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(found)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes after end of data", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(path).map(|m| m.permissions().mode()).unwrap_or(0o644);
        tmp.as_file().set_permissions(fs::Permissions::from_mode(mode)).map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// The on-disk mesh has no plane coordinate or bounds; they are implied by
/// the geometry (`z = length / 2`, square `[0, pitch]²`).
fn check_mesh_matches_geometry(mesh: &CenterPlaneMesh, geom: &GeometrySpec) -> Result<()> {
    let z = 0.5 * geom.length;
    if mesh.z_plane() != z {
        return Err(Error::invalid(format!(
            "dataset files store center-plane meshes only (z = {z}); mesh is at z = {}",
            mesh.z_plane()
        )));
    }
    if mesh.bounds() != BoundingBox::square(geom.pitch) {
        return Err(Error::invalid(format!(
            "mesh bounds {:?} differ from the geometry cell [0, {}]²",
            mesh.bounds(),
            geom.pitch
        )));
    }
    Ok(())
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    data.validate()?;
    check_mesh_matches_geometry(&data.mesh, &data.geometry)?;
    let mut e = Encoder::default();
    e.bytes(DATASET_MAGIC);
    e.count("n_samples", data.len())?;
    e.count("n1", data.n1)?;
    e.count("N", data.mesh.len())?;
    e.count("n_scalar", 2)?;
    let r = &data.ranges;
    e.f64s(&[r.p_max.0, r.p_max.1, r.t_in.0, r.t_in.1, r.v_in.0, r.v_in.1]);
    e.u64(data.seed);
    e.f64s(&[data.geometry.pitch, data.geometry.rod_diameter, data.geometry.length]);
    let m = &data.mesh;
    for i in 0..m.len() {
        e.f64s(&[m.x()[i], m.y()[i], m.wall_distance()[i]]);
    }
    for (s, f) in data.samples.iter().zip(&data.snapshots) {
        e.f64s(&s.p_rod);
        e.f64s(&[s.t_in, s.v_in]);
        e.f64s(&f.t);
        e.f64s(&f.v);
        e.f64s(&f.k);
    }
    Ok(e.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut d = Decoder::new("dataset", bytes);
    d.magic(DATASET_MAGIC)?;
    let n_samples = d.count()?;
    let n1 = d.count()?;
    let n_nodes = d.count()?;
    let scalar_at = d.pos;
    let n_scalar = d.count()?;
    if n_scalar != 2 {
        return Err(d.err_at(scalar_at, format!("n_scalar must be 2, found {n_scalar}")));
    }
    let expected = dataset_file_len(n_samples as u64, n1 as u64, n_nodes as u64, n_scalar as u64);
    if bytes.len() as u64 != expected {
        return Err(d.err_at(
            bytes.len().min(expected as usize),
            format!("length mismatch: header implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let r = d.f64s(6)?;
    let ranges = InputRanges {
        p_max: (r[0], r[1]),
        t_in: (r[2], r[3]),
        v_in: (r[4], r[5]),
    };
    let seed = d.u64()?;
    let g = d.f64s(3)?;
    let geometry = GeometrySpec {
        pitch: g[0],
        rod_diameter: g[1],
        length: g[2],
    };
    let mesh_at = d.pos;
    let coords = d.f64s(3 * n_nodes)?;
    let mesh = CenterPlaneMesh::new(
        coords.iter().step_by(3).copied().collect(),
        coords.iter().skip(1).step_by(3).copied().collect(),
        coords.iter().skip(2).step_by(3).copied().collect(),
        BoundingBox::square(geometry.pitch),
        0.5 * geometry.length,
    )
    .map_err(|e| d.err_at(mesh_at, e.to_string()))?;
    let mut samples = Vec::with_capacity(n_samples);
    let mut snapshots = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let p_rod = d.f64s(n1)?;
        let t_in = d.f64()?;
        let v_in = d.f64()?;
        samples.push(InputSample { p_rod, t_in, v_in });
        snapshots.push(FieldSnapshot {
            t: d.f64s(n_nodes)?,
            v: d.f64s(n_nodes)?,
            k: d.f64s(n_nodes)?,
        });
    }
    d.finish()?;
    Ok(Dataset {
        geometry,
        ranges,
        seed,
        n1,
        mesh,
        samples,
        snapshots,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(data)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}

fn encode_layer(e: &mut Encoder, layer: &Layer) -> Result<()> {
    e.count("layer rows", layer.out_dim())?;
    e.count("layer cols", layer.in_dim())?;
    e.f64s(layer.weight.as_slice());
    e.f64s(&layer.bias);
    Ok(())
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut e = Encoder::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.count("n1", c.n1)?;
    e.count("n_scalar", c.n_scalar)?;
    e.count("n_nodes", c.n_nodes)?;
    e.f64(c.dropout_rate);
    for hidden in [&c.branch_hidden, &c.trunk_hidden] {
        e.count("hidden layer count", hidden.len())?;
        for &w in hidden.iter() {
            e.count("hidden width", w)?;
        }
    }
    let n = &params.norm;
    e.count("input channels", n.input_min.len())?;
    e.f64s(&n.input_min);
    e.f64s(&n.input_max);
    e.f64s(&n.output_mean);
    e.f64s(&n.output_std);
    for layer in params.net.layers() {
        encode_layer(&mut e, layer)?;
    }
    Ok(e.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut d = Decoder::new("checkpoint", bytes);
    d.magic(CHECKPOINT_MAGIC)?;
    let n1 = d.count()?;
    let n_scalar = d.count()?;
    let n_nodes = d.count()?;
    let dropout_rate = d.f64()?;
    let hidden = |d: &mut Decoder| -> Result<Vec<usize>> {
        let len = d.count()?;
        (0..len).map(|_| d.count()).collect()
    };
    let branch_hidden = hidden(&mut d)?;
    let trunk_hidden = hidden(&mut d)?;
    let config = ModelConfig {
        n1,
        n_scalar,
        branch_hidden,
        trunk_hidden,
        n_nodes,
        dropout_rate,
    };
    config.validate().map_err(|e| d.err(e.to_string()))?;

    let norm_at = d.pos;
    let channels = d.count()?;
    if channels != n1 + n_scalar {
        return Err(d.err_at(norm_at, format!("normalization covers {channels} inputs, config implies {}", n1 + n_scalar)));
    }
    let input_min = d.f64s(channels)?;
    let input_max = d.f64s(channels)?;
    let mean = d.f64s(3)?;
    let std = d.f64s(3)?;
    let norm = NormalizationStats {
        input_min,
        input_max,
        output_mean: [mean[0], mean[1], mean[2]],
        output_std: [std[0], std[1], std[2]],
    };

    let mut net = Network::zeros(&config);
    let names = net.layer_names();
    for (name, layer) in names.iter().zip(net.layers_mut()) {
        let at = d.pos;
        let rows = d.count()?;
        let cols = d.count()?;
        if (rows, cols) != layer.weight.shape() {
            return Err(d.err_at(
                at,
                format!(
                    "layer {name}: config implies {}x{}, file has {rows}x{cols}",
                    layer.out_dim(),
                    layer.in_dim()
                ),
            ));
        }
        let values = d.f64s(rows * cols)?;
        layer.weight = DenseMatrix::new(rows, cols, values).map_err(|e| d.err_at(at, format!("layer {name}: {e}")))?;
        layer.bias = d.f64s(rows)?;
    }
    d.finish()?;
    ModelParams::new(config, net, norm)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Pretty-printer that writes every float with 17 significant digits.
struct ReportFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for ReportFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Report JSON: pretty-printed, keys in declaration order, floats with 17
/// significant digits (non-finite floats become `null`).
pub fn report_to_string<T: Serialize + ?Sized>(report: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ReportFormatter(serde_json::ser::PrettyFormatter::new()));
    report.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_report<T: Serialize + ?Sized>(path: impl AsRef<Path>, report: &T) -> Result<()> {
    write_atomic(path.as_ref(), report_to_string(report)?.as_bytes())
}

pub fn read_report<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = read_file(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::numerics::RandomStream;
    use crate::oracle::{generate_dataset, generate_mesh, FluidProperties};
    use crate::training::{CVReport, FoldRecord, StopReason};

    fn small_dataset(n: usize) -> Dataset {
        let g = GeometrySpec::default();
        let mesh = generate_mesh(&g, 24, 0.4).unwrap();
        generate_dataset(n, 5, &g, &FluidProperties::default(), &mesh, &InputRanges::default(), 4).unwrap()
    }

    fn small_params() -> ModelParams {
        let cfg = tiny_config();
        let norm = NormalizationStats::from_ranges(&InputRanges::default(), cfg.n1);
        ModelParams::init(cfg, norm, &mut RandomStream::new(8)).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = small_dataset(3);
        let bytes = encode_dataset(&data).unwrap();
        assert_eq!(bytes.len() as u64, dataset_file_len(3, 4, data.mesh.len() as u64, 2));
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.samples, data.samples);
        assert_eq!(back.snapshots, data.snapshots);
        assert_eq!(back.mesh, data.mesh);
        assert_eq!((back.seed, back.n1, back.ranges, back.geometry), (data.seed, data.n1, data.ranges, data.geometry));
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn dataset_bad_magic_names_expected() {
        let mut bytes = encode_dataset(&small_dataset(1)).unwrap();
        bytes[3] = b'X';
        let msg = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(msg.contains("\"MIODS001\""), "{msg}");
        assert!(msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn dataset_truncation_reports_lengths() {
        let bytes = encode_dataset(&small_dataset(2)).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        let msg = decode_dataset(cut).unwrap_err().to_string();
        assert!(msg.contains(&bytes.len().to_string()) && msg.contains(&cut.len().to_string()), "{msg}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_dataset(&long).is_err());
        assert!(decode_dataset(&bytes[..5]).is_err());
    }

    #[test]
    fn dataset_rejects_off_center_mesh() {
        let g = GeometrySpec::default();
        let mesh = generate_mesh(&g, 24, 0.3).unwrap();
        let data = generate_dataset(1, 5, &g, &FluidProperties::default(), &mesh, &InputRanges::default(), 4).unwrap();
        assert!(encode_dataset(&data).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = small_params();
        let bytes = encode_checkpoint(&params).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.net, params.net);
        assert_eq!(back.norm, params.norm);
        assert_eq!(back.config, params.config);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_with_wrong_head_shape_names_both() {
        let params = small_params();
        let mut bytes = encode_checkpoint(&params).unwrap();
        // n_nodes lives right after magic, n1, n_scalar.
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        let msg = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(msg.contains("3x") && msg.contains("2x"), "{msg}");
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let bytes = encode_checkpoint(&small_params()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'N';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("MIOCK001"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let params = small_params();
        write_checkpoint(&path, &params).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().net, params.net);
        let err = read_checkpoint(dir.path().join("absent")).unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    fn cv_report() -> CVReport {
        let folds = (1..=5)
            .map(|i| FoldRecord {
                fold: i - 1,
                train_size: 8,
                val_size: 2,
                best_val_loss: i as f64 * 1e-3,
                best_epoch: i,
                epochs_run: i + 10,
                stop_reason: StopReason::Patience,
            })
            .collect();
        CVReport::from_folds(7, folds, vec![vec![0, 1]; 5])
    }

    #[test]
    fn report_json_precision_order_and_parse_back() {
        let report = cv_report();
        let text = report_to_string(&report).unwrap();
        let mean: f64 = serde_json::from_str::<serde_json::Value>(&text).unwrap()["mean_val_loss"].as_f64().unwrap();
        assert!((mean - 3e-3).abs() < 1e-18);
        assert!(text.contains("\"best_val_loss\": 1.0000000000000000e-3"), "{text}");
        let k = text.find("\"k_folds\"").unwrap();
        let s = text.find("\"seed\"").unwrap();
        let f = text.find("\"folds\"").unwrap();
        let m = text.find("\"mean_val_loss\"").unwrap();
        assert!(k < s && s < f && f < m);
        let back: CVReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cv.json");
        write_report(&path, &cv_report()).unwrap();
        assert_eq!(read_report::<CVReport>(&path).unwrap(), cv_report());
        assert!(write_report(dir.path().join("no/such/dir/x.json"), &cv_report()).is_err());
    }
}
