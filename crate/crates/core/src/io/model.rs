//! Linear shape model files: two `TGRD` records back to back, the mean as
//! N x 1 x 3 and the basis as K x N x 3 (component k, vertex j, xyz).

use std::io::BufReader;
use std::path::Path;

use nalgebra::DMatrix;

use super::grid::GridTensor;
use crate::morphable::LinearShapeModel;
use crate::{Error, Result, Vec3};

pub fn model_bytes(model: &LinearShapeModel) -> Vec<u8> {
    let n = model.n_vertices();
    let k = model.n_components();
    let mean = GridTensor {
        height: n,
        width: 1,
        channels: 3,
        data: model.mean().iter().flat_map(|p| p.iter().map(|&v| v as f32).collect::<Vec<_>>()).collect(),
    };
    let basis = model.basis();
    let basis = GridTensor {
        height: k,
        width: n,
        channels: 3,
        data: (0..k)
            .flat_map(|c| (0..3 * n).map(move |r| basis[(r, c)] as f32))
            .collect(),
    };
    let mut out = mean.to_bytes();
    out.extend(basis.to_bytes());
    out
}

pub fn write_model(path: &Path, model: &LinearShapeModel) -> Result<()> {
    std::fs::write(path, model_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn parse_model(bytes: &[u8], path: &Path) -> Result<LinearShapeModel> {
    let mut cursor = bytes;
    let mean = GridTensor::read_from(&mut cursor, path)?;
    let basis = GridTensor::read_from(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", cursor.len())));
    }
    if mean.width != 1 || mean.channels != 3 {
        return Err(Error::format(path, format!("mean must be N x 1 x 3, got {} x {} x {}", mean.height, mean.width, mean.channels)));
    }
    let n = mean.height;
    if basis.width != n || basis.channels != 3 {
        return Err(Error::format(
            path,
            format!("basis must be K x {n} x 3, got {} x {} x {}", basis.height, basis.width, basis.channels),
        ));
    }
    let mean_points: Vec<Vec3> = mean
        .data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    let m = DMatrix::from_fn(3 * n, basis.height, |r, c| basis.data[c * 3 * n + r] as f64);
    if !mean_points.iter().all(|p| p.iter().all(|v| v.is_finite())) || !m.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, "model holds non-finite values"));
    }
    LinearShapeModel::new(mean_points, m)
}

pub fn read_model(path: &Path) -> Result<LinearShapeModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(file), &mut bytes).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_single_precision() {
        let mean = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let basis = DMatrix::from_fn(9, 2, |r, c| if r == c * 4 { 0.5 } else { 0.0 });
        let model = LinearShapeModel::new(mean, basis).unwrap();
        let back = parse_model(&model_bytes(&model), Path::new("m")).unwrap();
        assert_eq!(back.mean(), model.mean());
        assert_eq!(back.basis(), model.basis());
    }

    #[test]
    fn rejects_mismatched_records() {
        let p = Path::new("m");
        let mean = GridTensor::new(3, 1, 3, vec![0.0; 9]).unwrap();
        let basis = GridTensor::new(2, 4, 3, vec![0.0; 24]).unwrap();
        let mut b = mean.to_bytes();
        b.extend(basis.to_bytes());
        assert!(matches!(parse_model(&b, p), Err(Error::Format { .. })));
        assert!(parse_model(&mean.to_bytes(), p).is_err());
    }
}
