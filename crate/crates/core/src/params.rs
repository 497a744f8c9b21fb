//! Parameter JSON and JSONL with errors that name the offending field or line.

use serde_json::{Map, Value};

use crate::camera::CameraParams;
use crate::head_model::{AvatarParams, HeadModel};
use crate::{Error, Result};

fn floats(obj: &Map<String, Value>, field: &str) -> Result<Vec<f32>> {
    let v = obj.get(field).ok_or_else(|| Error::param(field, "missing"))?;
    let arr = v.as_array().ok_or_else(|| Error::param(field, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| Error::param(field, format!("element {i} is not a number")))
        })
        .collect()
}

fn camera(obj: &Map<String, Value>) -> Result<CameraParams> {
    let Some(v) = obj.get("camera") else { return Ok(CameraParams::default()) };
    let c = v.as_object().ok_or_else(|| Error::param("camera", "expected an object"))?;
    let get = |k: &str, default: f32| -> Result<f32> {
        match c.get(k) {
            None => Ok(default),
            Some(x) => x.as_f64().map(|f| f as f32).ok_or_else(|| Error::param(format!("camera.{k}"), "expected a number")),
        }
    };
    CameraParams::new(get("scale", 1.0)?, get("tx", 0.0)?, get("ty", 0.0)?)
}

fn offsets(obj: &Map<String, Value>) -> Result<Option<Vec<[f32; 3]>>> {
    match obj.get("offsets") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(rows)) => rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let bad = || Error::param("offsets", format!("row {i} must be three numbers"));
                let r = r.as_array().filter(|r| r.len() == 3).ok_or_else(bad)?;
                let mut out = [0.0f32; 3];
                for (o, x) in out.iter_mut().zip(r) {
                    *o = x.as_f64().ok_or_else(bad)? as f32;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(Error::param("offsets", "expected null or an array of rows")),
    }
}

/// Parameters from a JSON object. `camera` defaults to the identity camera and
/// `offsets` to none; other keys are ignored.
pub fn params_from_value(v: &Value) -> Result<AvatarParams> {
    let obj = v.as_object().ok_or_else(|| Error::param("params", "expected a JSON object"))?;
    Ok(AvatarParams {
        beta: floats(obj, "beta")?,
        phi: floats(obj, "phi")?,
        theta: floats(obj, "theta")?,
        camera: camera(obj)?,
        offsets: offsets(obj)?,
    })
}

/// Parse and validate against `model`.
pub fn parse_params(text: &str, model: &HeadModel) -> Result<AvatarParams> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::param("params", e))?;
    let p = params_from_value(&v)?;
    p.validate(model)?;
    Ok(p)
}

/// One parameter set per non-blank line; errors carry the 1-based line number.
pub fn parse_params_jsonl(text: &str, model: &HeadModel) -> Result<Vec<AvatarParams>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_params(l, model).map_err(|e| Error::Line { line: i + 1, source: Box::new(e) }))
        .collect()
}

pub fn params_to_json(p: &AvatarParams) -> String {
    serde_json::to_string(p).expect("params serialise")
}

/// Named starting points for interactive control.
pub fn presets(model: &HeadModel) -> Vec<(String, AvatarParams)> {
    let zero = AvatarParams::zeros(model);
    let with_theta = |idx: usize, val: f32| {
        let mut p = zero.clone();
        if idx < p.theta.len() {
            p.theta[idx] = val;
        }
        p
    };
    let mut out = vec![("neutral".to_string(), zero.clone())];
    // Jaw is joint 1; its x rotation opens the mouth.
    out.push(("jaw_open".into(), with_theta(3 + 3, 0.3)));
    out.push(("turn_left".into(), with_theta(1, 0.5)));
    out.push(("turn_right".into(), with_theta(1, -0.5)));
    out.push(("nod".into(), with_theta(3, 0.25)));
    let mut expr = zero.clone();
    expr.phi.iter_mut().enumerate().for_each(|(i, x)| *x = if i % 2 == 0 { 1.0 } else { -1.0 });
    out.push(("expressive".into(), expr));
    let mut far = zero;
    far.camera.scale = 0.6;
    out.push(("zoom_out".into(), far));
    out
}
