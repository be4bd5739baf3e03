//! HDF5 dataset container.
//!
//! Layout: groups `/train` and `/test`, each with datasets `x` (`n×12×64×64`
//! f32), `m` (`n×25×64×64` u8), `y` (`n×12×64×64` f32) and `t0` (`n` i64
//! seconds since the epoch). Root attributes: `norm_max`, `crop_origin`,
//! `landmask64`, `schema_version` and `provenance` (JSON object).

use std::collections::BTreeMap;
use std::path::Path;

use hdf5::types::VarLenUnicode;
use ndarray::{s, Array1, Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use super::frame::timestamp_from_epoch;
use super::prep::CropSpec;
use super::Sample;
use crate::error::{Error, Result};
use crate::{FRAMES_PER_HOUR, GRID, MASK_LEVELS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn group(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerMeta {
    pub norm_max: f64,
    pub crop: CropSpec,
    pub landmask64: Array2<bool>,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    pub split: Split,
    pub samples: Vec<Sample>,
    pub meta: ContainerMeta,
}

fn fmt_err(node: &str, reason: impl std::fmt::Display) -> Error {
    Error::Format {
        node: node.to_string(),
        reason: reason.to_string(),
    }
}

pub fn write_container(path: impl AsRef<Path>, meta: &ContainerMeta, train: &[Sample], test: &[Sample]) -> Result<()> {
    if !(meta.norm_max > 0.0) {
        return Err(Error::Config("norm_max must be positive".into()));
    }
    let file = hdf5::File::create(path.as_ref())?;
    file.new_attr::<f64>().create("norm_max")?.write_scalar(&meta.norm_max)?;
    file.new_attr::<u32>().create("schema_version")?.write_scalar(&SCHEMA_VERSION)?;
    file.new_attr_builder()
        .with_data(&[meta.crop.origin_row as u32, meta.crop.origin_col as u32])
        .create("crop_origin")?;
    file.new_attr_builder()
        .with_data(&meta.landmask64.mapv(u8::from))
        .create("landmask64")?;
    let prov: VarLenUnicode = serde_json::to_string(&meta.provenance)?
        .parse()
        .map_err(|e| fmt_err("/@provenance", e))?;
    file.new_attr::<VarLenUnicode>().create("provenance")?.write_scalar(&prov)?;

    for (split, samples) in [(Split::Train, train), (Split::Test, test)] {
        let group = file.create_group(split.group())?;
        let n = samples.len();
        let mut x = Array4::<f32>::zeros((n, FRAMES_PER_HOUR, GRID, GRID));
        let mut y = Array4::<f32>::zeros((n, FRAMES_PER_HOUR, GRID, GRID));
        let mut m = Array4::<u8>::zeros((n, MASK_LEVELS, GRID, GRID));
        for (i, smp) in samples.iter().enumerate() {
            x.slice_mut(s![i, .., .., ..]).assign(&smp.x);
            y.slice_mut(s![i, .., .., ..]).assign(&smp.y);
            m.slice_mut(s![i, .., .., ..]).assign(&smp.m);
        }
        let t0: Array1<i64> = samples.iter().map(|s| s.t0.timestamp()).collect();
        group.new_dataset_builder().with_data(&x).create("x")?;
        group.new_dataset_builder().with_data(&m).create("m")?;
        group.new_dataset_builder().with_data(&y).create("y")?;
        group.new_dataset_builder().with_data(&t0).create("t0")?;
    }
    Ok(())
}

fn read_meta_from(file: &hdf5::File) -> Result<ContainerMeta> {
    let norm_max: f64 = file
        .attr("norm_max")
        .and_then(|a| a.read_scalar())
        .map_err(|e| fmt_err("/@norm_max", e))?;
    if !(norm_max > 0.0) {
        return Err(fmt_err("/@norm_max", format!("must be positive, got {norm_max}")));
    }
    let version: u32 = file
        .attr("schema_version")
        .and_then(|a| a.read_scalar())
        .map_err(|e| fmt_err("/@schema_version", e))?;
    if version != SCHEMA_VERSION {
        return Err(fmt_err("/@schema_version", format!("unsupported version {version}")));
    }
    let origin: Vec<u32> = file
        .attr("crop_origin")
        .and_then(|a| a.read_raw())
        .map_err(|e| fmt_err("/@crop_origin", e))?;
    let [row, col] = origin[..] else {
        return Err(fmt_err("/@crop_origin", "expected two values"));
    };
    let crop = CropSpec::new(row as usize, col as usize).map_err(|e| fmt_err("/@crop_origin", e))?;
    let land: Array2<u8> = file
        .attr("landmask64")
        .and_then(|a| a.read_2d())
        .map_err(|e| fmt_err("/@landmask64", e))?;
    if land.dim() != (GRID, GRID) {
        return Err(fmt_err("/@landmask64", format!("shape {:?}", land.dim())));
    }
    let provenance = match file.attr("provenance") {
        Ok(a) => {
            let s: VarLenUnicode = a.read_scalar().map_err(|e| fmt_err("/@provenance", e))?;
            serde_json::from_str(s.as_str()).map_err(|e| fmt_err("/@provenance", e))?
        }
        Err(_) => BTreeMap::new(),
    };
    Ok(ContainerMeta {
        norm_max,
        crop,
        landmask64: land.mapv(|v| v != 0),
        provenance,
    })
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<ContainerMeta> {
    let file = hdf5::File::open(path.as_ref()).map_err(|e| fmt_err("/", e))?;
    read_meta_from(&file)
}

pub fn read_container(path: impl AsRef<Path>, split: Split) -> Result<DatasetContainer> {
    let file = hdf5::File::open(path.as_ref()).map_err(|e| fmt_err("/", e))?;
    let meta = read_meta_from(&file)?;
    let gname = split.group();
    let group = file.group(gname).map_err(|e| fmt_err(&format!("/{gname}"), e))?;
    let node = |d: &str| format!("/{gname}/{d}");
    let x: Array4<f32> = group
        .dataset("x")
        .and_then(|d| d.read())
        .map_err(|e| fmt_err(&node("x"), e))?;
    let y: Array4<f32> = group
        .dataset("y")
        .and_then(|d| d.read())
        .map_err(|e| fmt_err(&node("y"), e))?;
    let m: Array4<u8> = group
        .dataset("m")
        .and_then(|d| d.read())
        .map_err(|e| fmt_err(&node("m"), e))?;
    let t0: Vec<i64> = group
        .dataset("t0")
        .and_then(|d| d.read_raw())
        .map_err(|e| fmt_err(&node("t0"), e))?;
    let n = t0.len();
    let hour = (n, FRAMES_PER_HOUR, GRID, GRID);
    for (name, dim) in [("x", x.dim()), ("y", y.dim())] {
        if dim != hour {
            return Err(fmt_err(&node(name), format!("shape {dim:?}, expected {hour:?}")));
        }
    }
    if m.dim() != (n, MASK_LEVELS, GRID, GRID) {
        return Err(fmt_err(&node("m"), format!("shape {:?}", m.dim())));
    }
    let mut samples = Vec::with_capacity(n);
    for (i, &t) in t0.iter().enumerate() {
        samples.push(Sample {
            x: x.slice(s![i, .., .., ..]).to_owned(),
            m: m.slice(s![i, .., .., ..]).to_owned(),
            y: y.slice(s![i, .., .., ..]).to_owned(),
            t0: timestamp_from_epoch(t).map_err(|e| fmt_err(&node("t0"), e))?,
        });
    }
    Ok(DatasetContainer { split, samples, meta })
}

/// Writes named 4-D `f32` arrays (predictions, uncertainty maps) to a
/// standalone HDF5 file with a `norm_max` root attribute.
pub fn write_arrays(path: impl AsRef<Path>, norm_max: f64, arrays: &[(&str, ArrayView4<'_, f32>)]) -> Result<()> {
    let file = hdf5::File::create(path.as_ref())?;
    file.new_attr::<f64>().create("norm_max")?.write_scalar(&norm_max)?;
    for (name, a) in arrays {
        file.new_dataset_builder().with_data(&a.as_standard_layout()).create(*name)?;
    }
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>, name: &str) -> Result<Array4<f32>> {
    let file = hdf5::File::open(path.as_ref()).map_err(|e| fmt_err("/", e))?;
    let ds = file.dataset(name).map_err(|e| fmt_err(name, e))?;
    Ok(ds.read::<f32, ndarray::Ix4>().map_err(|e| fmt_err(name, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use ndarray::Array3;

    fn sample(i: usize) -> Sample {
        let t0 = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::minutes(5 * i as i64);
        Sample {
            x: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a + b + c + i) % 17) as f32 / 16.0),
            m: Array3::from_shape_fn((25, 64, 64), |(a, b, c)| u8::from((a * b + c + i) % 3 == 0)),
            y: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a * c + b + i) % 13) as f32 / 9.0),
            t0,
        }
    }

    fn meta() -> ContainerMeta {
        let mut provenance = BTreeMap::new();
        provenance.insert("source".into(), "unit-test".into());
        ContainerMeta {
            norm_max: 523.0,
            crop: CropSpec::new(96, 80).unwrap(),
            landmask64: Array2::from_shape_fn((64, 64), |(r, c)| r > c / 2),
            provenance,
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.h5");
        let train: Vec<_> = (0..10).map(sample).collect();
        let test: Vec<_> = (10..13).map(sample).collect();
        write_container(&path, &meta(), &train, &test).unwrap();
        let tr = read_container(&path, Split::Train).unwrap();
        let te = read_container(&path, Split::Test).unwrap();
        assert_eq!(tr.samples, train);
        assert_eq!(te.samples, test);
        assert_eq!(tr.meta, meta());
        assert_eq!(te.split, Split::Test);
    }

    #[test]
    fn array_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.h5");
        let a = Array4::from_shape_fn((2, 3, 4, 5), |(i, j, k, l)| (i * 60 + j * 20 + k * 5 + l) as f32 * 0.25);
        write_arrays(&path, 7.0, &[("mean", a.view()), ("t", a.t())]).unwrap();
        assert_eq!(read_array(&path, "mean").unwrap(), a);
        assert_eq!(read_array(&path, "t").unwrap(), a.t().to_owned());
        assert!(matches!(read_array(&path, "nope"), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_norm_max_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.h5");
        let f = hdf5::File::create(&path).unwrap();
        f.new_attr::<u32>().create("schema_version").unwrap().write_scalar(&1u32).unwrap();
        drop(f);
        match read_container(&path, Split::Train) {
            Err(Error::Format { node, .. }) => assert_eq!(node, "/@norm_max"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
