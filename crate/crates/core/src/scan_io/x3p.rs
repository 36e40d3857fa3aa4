//! Reader for the subset of ISO 5436-2 (x3p) used by ballistics scan
//! databases: isotropic, row-major, float64 rasters.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{ScanIoError, UnlabeledScan};
use crate::surface::SurfaceMatrix;

const DEFAULT_DATA_LINK: &str = "bindata/data.bin";
/// Relative disagreement allowed between the X and Y increments.
const ISOTROPY_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
struct X3pHeader {
    size_x: usize,
    size_y: usize,
    increment_x: f64,
    increment_y: f64,
    data_link: String,
}

pub fn read_x3p(path: &Path) -> Result<UnlabeledScan, ScanIoError> {
    let container_err = |message: String| ScanIoError::Container {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| ScanIoError::io(path, e))?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| container_err(e.to_string()))?;

    let xml = {
        let mut entry = archive
            .by_name("main.xml")
            .map_err(|e| container_err(format!("main.xml: {e}")))?;
        let mut text = String::new();
        entry
            .read_to_string(&mut text)
            .map_err(|e| ScanIoError::io(path, e))?;
        text
    };
    let header = parse_main_xml(&xml)?;

    let raw = {
        let mut entry = archive
            .by_name(&header.data_link)
            .map_err(|e| container_err(format!("{}: {e}", header.data_link)))?;
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| ScanIoError::io(path, e))?;
        bytes
    };

    let surface = decode_raster(&header, &raw)?;
    Ok(UnlabeledScan {
        surface,
        source_path: path.display().to_string(),
    })
}

fn decode_raster(header: &X3pHeader, raw: &[u8]) -> Result<SurfaceMatrix, ScanIoError> {
    let expected = header
        .size_x
        .checked_mul(header.size_y)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| ScanIoError::UnsupportedGeometry("raster size overflows".into()))?;
    if raw.len() != expected {
        return Err(ScanIoError::SizeMismatch {
            expected,
            got: raw.len(),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(SurfaceMatrix::from_nan_encoded(
        header.size_y,
        header.size_x,
        header.increment_x,
        values,
    )?)
}

fn parse_main_xml(xml: &str) -> Result<X3pHeader, ScanIoError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ScanIoError::Xml(e.to_string()))?;
    let root = doc.root_element();

    let record1 = child(root, "Record1").ok_or(ScanIoError::MissingField("Record1"))?;
    let axes = child(record1, "Axes").ok_or(ScanIoError::MissingField("Record1.Axes"))?;
    let cx = child(axes, "CX").ok_or(ScanIoError::MissingField("Record1.Axes.CX"))?;
    let cy = child(axes, "CY").ok_or(ScanIoError::MissingField("Record1.Axes.CY"))?;
    let cz = child(axes, "CZ").ok_or(ScanIoError::MissingField("Record1.Axes.CZ"))?;

    for (axis, name) in [(cx, "CX"), (cy, "CY")] {
        if let Some(kind) = text(axis, "AxisType") {
            if kind != "I" {
                return Err(ScanIoError::UnsupportedGeometry(format!(
                    "axis {name} has AxisType {kind}; only incremental (I) axes are supported"
                )));
            }
        }
    }
    let z_type = text(cz, "DataType").ok_or(ScanIoError::MissingField("Record1.Axes.CZ.DataType"))?;
    if z_type != "D" {
        return Err(ScanIoError::UnsupportedGeometry(format!(
            "CZ DataType {z_type}; only float64 (D) rasters are supported"
        )));
    }

    let increment_x = parse_f64(cx, "Increment", "Record1.Axes.CX.Increment")?;
    let increment_y = parse_f64(cy, "Increment", "Record1.Axes.CY.Increment")?;
    for (v, field) in [
        (increment_x, "Record1.Axes.CX.Increment"),
        (increment_y, "Record1.Axes.CY.Increment"),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ScanIoError::BadField {
                field,
                value: v.to_string(),
            });
        }
    }
    if (increment_x - increment_y).abs() > ISOTROPY_TOLERANCE * increment_x.max(increment_y) {
        return Err(ScanIoError::UnsupportedGeometry(format!(
            "anisotropic increments CX={increment_x:e} CY={increment_y:e}"
        )));
    }

    let record3 = child(root, "Record3").ok_or(ScanIoError::MissingField("Record3"))?;
    let dims = child(record3, "MatrixDimension")
        .ok_or(ScanIoError::MissingField("Record3.MatrixDimension"))?;
    let size_x = parse_usize(dims, "SizeX", "Record3.MatrixDimension.SizeX")?;
    let size_y = parse_usize(dims, "SizeY", "Record3.MatrixDimension.SizeY")?;
    if let Some(z) = text(dims, "SizeZ") {
        if z != "1" {
            return Err(ScanIoError::UnsupportedGeometry(format!("SizeZ = {z}")));
        }
    }
    if size_x == 0 || size_y == 0 {
        return Err(ScanIoError::UnsupportedGeometry(format!(
            "empty raster {size_x}x{size_y}"
        )));
    }
    let data_link = child(record3, "DataLink")
        .and_then(|dl| text(dl, "PointDataLink"))
        .unwrap_or(DEFAULT_DATA_LINK)
        .to_string();

    Ok(X3pHeader {
        size_x,
        size_y,
        increment_x,
        increment_y,
        data_link,
    })
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children()
        .find(|c| c.is_element() && c.tag_name().name() == name)
}

fn text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|c| c.text()).map(str::trim)
}

fn parse_f64(node: roxmltree::Node, name: &str, field: &'static str) -> Result<f64, ScanIoError> {
    let raw = text(node, name).ok_or(ScanIoError::MissingField(field))?;
    raw.parse().map_err(|_| ScanIoError::BadField {
        field,
        value: raw.to_string(),
    })
}

fn parse_usize(node: roxmltree::Node, name: &str, field: &'static str) -> Result<usize, ScanIoError> {
    let raw = text(node, name).ok_or(ScanIoError::MissingField(field))?;
    raw.parse().map_err(|_| ScanIoError::BadField {
        field,
        value: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xml(size_x: &str, size_y: &str, cx: &str, cy: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<p:ISO5436_2 xmlns:p="http://www.opengps.eu/2008/ISO5436_2">
  <Record1>
    <Revision>ISO5436 - 2000</Revision>
    <FeatureType>SUR</FeatureType>
    <Axes>
      <CX><AxisType>I</AxisType><DataType>D</DataType><Increment>{cx}</Increment><Offset>0</Offset></CX>
      <CY><AxisType>I</AxisType><DataType>D</DataType><Increment>{cy}</Increment><Offset>0</Offset></CY>
      <CZ><AxisType>A</AxisType><DataType>D</DataType></CZ>
    </Axes>
  </Record1>
  <Record3>
    <MatrixDimension><SizeX>{size_x}</SizeX><SizeY>{size_y}</SizeY><SizeZ>1</SizeZ></MatrixDimension>
    <DataLink><PointDataLink>bindata/data.bin</PointDataLink></DataLink>
  </Record3>
</p:ISO5436_2>"#
        )
    }

    #[test]
    fn parses_header() {
        let h = parse_main_xml(&xml("3", "2", "1.5625e-6", "1.5625e-6")).unwrap();
        assert_eq!(h.size_x, 3);
        assert_eq!(h.size_y, 2);
        assert_eq!(h.increment_x, 1.5625e-6);
        assert_eq!(h.data_link, "bindata/data.bin");
    }

    #[test]
    fn missing_size_names_the_field() {
        let broken = xml("3", "2", "1e-6", "1e-6").replace("<SizeX>3</SizeX>", "");
        match parse_main_xml(&broken) {
            Err(ScanIoError::MissingField(f)) => assert!(f.ends_with("SizeX")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn anisotropic_increments_rejected() {
        let doc = xml("3", "2", "1.0e-6", "1.02e-6");
        assert!(matches!(
            parse_main_xml(&doc),
            Err(ScanIoError::UnsupportedGeometry(_))
        ));
        // within tolerance
        assert!(parse_main_xml(&xml("3", "2", "1.0e-6", "1.005e-6")).is_ok());
    }

    #[test]
    fn non_double_raster_rejected() {
        let doc = xml("3", "2", "1e-6", "1e-6").replace(
            "<CZ><AxisType>A</AxisType><DataType>D</DataType></CZ>",
            "<CZ><AxisType>A</AxisType><DataType>F</DataType></CZ>",
        );
        assert!(matches!(
            parse_main_xml(&doc),
            Err(ScanIoError::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn raster_size_mismatch() {
        let h = parse_main_xml(&xml("3", "2", "1e-6", "1e-6")).unwrap();
        assert!(matches!(
            decode_raster(&h, &[0u8; 40]),
            Err(ScanIoError::SizeMismatch { expected: 48, got: 40 })
        ));
    }
}
