//! Head model <-> CVTH container. Integer arrays are stored as exact `f32`.

use std::path::Path;
use std::sync::Arc;

use super::HeadModel;
use crate::numerics::{load_container, save_container, SparseMatrix, Tensor, TensorMap};
use crate::{Error, Result};

/// Largest integer every `f32` in an index array can hold exactly.
const EXACT_INT: f32 = 16_777_216.0;

fn ints(data: impl IntoIterator<Item = usize>) -> Vec<f32> {
    data.into_iter().map(|v| v as f32).collect()
}

fn put_sparse(map: &mut TensorMap, prefix: &str, m: &SparseMatrix) -> Result<()> {
    let trip = m.triplets();
    if trip.is_empty() {
        return Err(Error::format(prefix, "sparse matrix has no entries"));
    }
    let k = trip.len();
    map.insert(format!("{prefix}_rows"), Tensor::new([k], ints(trip.iter().map(|t| t.0)))?);
    map.insert(format!("{prefix}_cols"), Tensor::new([k], ints(trip.iter().map(|t| t.1)))?);
    map.insert(format!("{prefix}_vals"), Tensor::new([k], trip.iter().map(|t| t.2).collect())?);
    map.insert(format!("{prefix}_shape"), Tensor::new([2], ints([m.rows(), m.cols()]))?);
    Ok(())
}

pub fn model_to_container(m: &HeadModel) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    map.insert("template".into(), m.template.clone());
    map.insert("shape_basis".into(), m.shape_basis.clone());
    map.insert("expr_basis".into(), m.expr_basis.clone());
    map.insert("skin_weights".into(), m.skin_weights.clone());
    put_sparse(&mut map, "joint_regressor", &m.joint_regressor)?;
    map.insert("parents".into(), Tensor::new([m.parents.len()], m.parents.iter().map(|&p| p as f32).collect())?);
    map.insert(
        "faces".into(),
        Tensor::new([m.faces.len(), 3], m.faces.iter().flat_map(|f| f.map(|i| i as f32)).collect())?,
    );
    map.insert("coarse_index".into(), Tensor::new([m.coarse_index.len()], ints(m.coarse_index.iter().map(|&i| i as usize)))?);
    for (i, s) in m.upsample_chain.iter().enumerate() {
        put_sparse(&mut map, &format!("upsample_{i}"), s)?;
    }
    Ok(map)
}

fn take(map: &mut TensorMap, name: &str) -> Result<Tensor> {
    map.remove(name).ok_or_else(|| Error::format(name, "missing entry"))
}

fn index_values(name: &str, t: &Tensor, allow_negative_one: bool) -> Result<Vec<i64>> {
    t.data()
        .iter()
        .map(|&v| {
            let ok = v.fract() == 0.0 && v.abs() < EXACT_INT && (v >= 0.0 || (allow_negative_one && v == -1.0));
            if ok {
                Ok(v as i64)
            } else {
                Err(Error::format(name, format!("value {v} is not a valid index")))
            }
        })
        .collect()
}

fn take_sparse(map: &mut TensorMap, prefix: &str) -> Result<SparseMatrix> {
    let shape_name = format!("{prefix}_shape");
    let shape = take(map, &shape_name)?;
    if shape.shape() != [2] {
        return Err(Error::format(shape_name, "expected two entries"));
    }
    let dims = index_values(&shape_name, &shape, false)?;
    let mut cols = Vec::new();
    for part in ["rows", "cols", "vals"] {
        let name = format!("{prefix}_{part}");
        let t = take(map, &name)?;
        if t.rank() != 1 {
            return Err(Error::format(name, "expected a 1-d array"));
        }
        cols.push((name, t));
    }
    let k = cols[0].1.len();
    if cols.iter().any(|(_, t)| t.len() != k) {
        return Err(Error::format(prefix, "rows, cols and vals lengths differ"));
    }
    let rows = index_values(&cols[0].0, &cols[0].1, false)?;
    let cidx = index_values(&cols[1].0, &cols[1].1, false)?;
    let trip: Vec<_> = (0..k).map(|i| (rows[i] as usize, cidx[i] as usize, cols[2].1.data()[i])).collect();
    SparseMatrix::from_triplets(dims[0] as usize, dims[1] as usize, &trip).map_err(|e| Error::format(prefix, e))
}

/// Rebuild and validate a model from container entries.
pub fn model_from_container(mut map: TensorMap) -> Result<HeadModel> {
    let template = take(&mut map, "template")?;
    let shape_basis = take(&mut map, "shape_basis")?;
    let expr_basis = take(&mut map, "expr_basis")?;
    let skin_weights = take(&mut map, "skin_weights")?;
    let joint_regressor = Arc::new(take_sparse(&mut map, "joint_regressor")?);
    let parents = take(&mut map, "parents")?;
    let parents = index_values("parents", &parents, true)?.into_iter().map(|p| p as i32).collect();
    let faces_t = take(&mut map, "faces")?;
    if faces_t.rank() != 2 || faces_t.dim(1) != 3 {
        return Err(Error::format("faces", format!("expected [F, 3], got {:?}", faces_t.shape())));
    }
    let faces = index_values("faces", &faces_t, false)?
        .chunks_exact(3)
        .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
        .collect();
    let coarse = take(&mut map, "coarse_index")?;
    let coarse_index = index_values("coarse_index", &coarse, false)?.into_iter().map(|v| v as u32).collect();
    let mut upsample_chain = Vec::new();
    while map.contains_key(&format!("upsample_{}_shape", upsample_chain.len())) {
        let prefix = format!("upsample_{}", upsample_chain.len());
        upsample_chain.push(Arc::new(take_sparse(&mut map, &prefix)?));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::format(extra.clone(), "unexpected entry in a head model file"));
    }
    let model = HeadModel {
        template,
        shape_basis,
        expr_basis,
        skin_weights,
        joint_regressor,
        parents,
        faces,
        coarse_index,
        upsample_chain,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(m: &HeadModel, path: impl AsRef<Path>) -> Result<()> {
    save_container(path, &model_to_container(m)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HeadModel> {
    model_from_container(load_container(path)?)
}
