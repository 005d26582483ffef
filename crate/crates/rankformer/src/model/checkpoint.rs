//! Versioned flat-text checkpoints: a dims header followed by named
//! parameter tensors. Values use the shortest exact decimal form, so a
//! save/load round-trip is bit-identical.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::model::{init_params, MlpDims, ModelParams, ModelSpec, RankFormerDims};
use crate::{Error, Result, Scalar};

const MAGIC: &str = "rankformer-checkpoint v1";

fn precision_tag<F: Scalar>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

pub fn save_checkpoint<F: Scalar>(spec: &ModelSpec, params: &ModelParams<F>) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("kind {}\n", spec.kind_str()));
    out.push_str(&format!("precision {}\n", precision_tag::<F>()));
    out.push_str(&format!("d_x {}\n", spec.d_x()));
    match spec {
        ModelSpec::RankFormer(d) => {
            out.push_str(&format!("y_max {}\n", d.y_max));
            out.push_str(&format!("n_layers {}\n", d.n_layers));
            out.push_str(&format!("n_heads {}\n", d.n_heads));
            out.push_str(&format!("dim_ff {}\n", d.dim_ff));
            out.push_str(&format!("head_width {}\n", d.head_width));
            out.push_str(&format!("standard_preln {}\n", u8::from(d.standard_preln)));
        }
        ModelSpec::Mlp(d) => {
            let dims: Vec<String> = d.hidden.iter().map(|h| h.to_string()).collect();
            out.push_str(&format!("hidden {}\n", dims.join(",")));
        }
    }
    let tensors = params.tensors();
    out.push_str(&format!("tensors {}\n", tensors.len()));
    for (name, tensor) in tensors {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "tensor {name} {} {}\n",
            tensor.ndim(),
            dims.join(" ")
        ));
        let values: Vec<String> = tensor.iter().map(|v| v.to_exact_string()).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines.next().ok_or_else(|| {
            Error::Checkpoint(format!("unexpected end of file at line {}", self.line_no))
        })
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Checkpoint(format!("expected `{key} ...`, got `{line}`")))
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("invalid {key} `{v}`")))
    }
}

pub fn load_checkpoint<F: Scalar>(text: &str) -> Result<(ModelSpec, ModelParams<F>)> {
    let mut reader = LineReader {
        lines: text.lines(),
        line_no: 0,
    };
    if reader.next()? != MAGIC {
        return Err(Error::Checkpoint("unrecognized checkpoint header".into()));
    }
    let kind = reader.field("kind")?;
    let precision = reader.field("precision")?;
    if precision != precision_tag::<F>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {precision} does not match requested {}",
            precision_tag::<F>()
        )));
    }
    let d_x = reader.usize_field("d_x")?;
    let spec = match kind.as_str() {
        "rankformer" => {
            let y_max = reader.usize_field("y_max")? as u8;
            let n_layers = reader.usize_field("n_layers")?;
            let n_heads = reader.usize_field("n_heads")?;
            let dim_ff = reader.usize_field("dim_ff")?;
            let head_width = reader.usize_field("head_width")?;
            let standard_preln = reader.usize_field("standard_preln")? != 0;
            ModelSpec::RankFormer(RankFormerDims {
                d_x,
                n_layers,
                n_heads,
                dim_ff,
                head_width,
                y_max,
                standard_preln,
            })
        }
        "mlp" => {
            let hidden_str = reader.field("hidden")?;
            let hidden = if hidden_str.is_empty() {
                Vec::new()
            } else {
                hidden_str
                    .split(',')
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::Checkpoint(format!("invalid hidden dim `{t}`")))
                    })
                    .collect::<Result<Vec<usize>>>()?
            };
            ModelSpec::Mlp(MlpDims { d_x, hidden })
        }
        other => return Err(Error::Checkpoint(format!("unknown model kind `{other}`"))),
    };

    let count = reader.usize_field("tensors")?;
    let mut params = init_params::<F>(&spec, 0);
    let mut slots = params.tensors_mut();
    if slots.len() != count {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this architecture, file has {count}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let header = reader.next()?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("tensor") {
            return Err(Error::Checkpoint(format!("expected tensor header, got `{header}`")));
        }
        let file_name = tokens
            .next()
            .ok_or_else(|| Error::Checkpoint("tensor header missing name".into()))?;
        if file_name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected `{name}`, found `{file_name}`"
            )));
        }
        let ndim: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Checkpoint("tensor header missing rank".into()))?;
        let shape: Vec<usize> = tokens
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("invalid dim `{t}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        if shape.len() != ndim {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: rank {ndim} but {} dims listed",
                shape.len()
            )));
        }
        if shape.as_slice() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: shape {:?} does not match architecture {:?}",
                shape,
                slot.shape()
            )));
        }
        let values_line = reader.next()?;
        let values: Vec<F> = values_line
            .split_whitespace()
            .map(|t| {
                F::from_exact_str(t)
                    .ok_or_else(|| Error::Checkpoint(format!("invalid value `{t}` in `{name}`")))
            })
            .collect::<Result<Vec<F>>>()?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: expected {expected} values, found {}",
                values.len()
            )));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        **slot = Arc::new(array);
    }
    if reader.next()? != "end" {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::RankFormer(RankFormerDims {
                d_x: 4,
                n_layers: 2,
                n_heads: 2,
                dim_ff: 8,
                head_width: 6,
                y_max: 2,
                standard_preln: true,
            }),
            ModelSpec::Mlp(MlpDims {
                d_x: 5,
                hidden: vec![7, 3],
            }),
        ]
    }

    #[test]
    fn save_load_round_trips_exactly() {
        for spec in specs() {
            let params = init_params::<f64>(&spec, 123);
            let text = save_checkpoint(&spec, &params);
            let (spec2, params2) = load_checkpoint::<f64>(&text).unwrap();
            assert_eq!(spec, spec2);
            for ((n1, t1), (n2, t2)) in params.tensors().iter().zip(params2.tensors().iter()) {
                assert_eq!(n1, n2);
                let bits1: Vec<u64> = t1.iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits1, bits2, "tensor {n1}");
            }
            // Serialization itself is a fixed point.
            assert_eq!(text, save_checkpoint(&spec2, &params2));
        }
    }

    #[test]
    fn f32_round_trip() {
        let spec = specs().remove(1);
        let params = init_params::<f32>(&spec, 9);
        let text = save_checkpoint(&spec, &params);
        let (_, params2) = load_checkpoint::<f32>(&text).unwrap();
        for ((_, t1), (_, t2)) in params.tensors().iter().zip(params2.tensors().iter()) {
            let bits1: Vec<u32> = t1.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u32> = t2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let spec = specs().remove(0);
        let params = init_params::<f64>(&spec, 1);
        let text = save_checkpoint(&spec, &params);
        assert!(load_checkpoint::<f32>(&text).is_err());
    }

    #[test]
    fn corrupted_tensor_name_is_rejected() {
        let spec = specs().remove(0);
        let params = init_params::<f64>(&spec, 1);
        let text = save_checkpoint(&spec, &params).replace("tensor cls", "tensor cls_oops");
        assert!(load_checkpoint::<f64>(&text).is_err());
    }
}
