use std::str::FromStr;

use super::{Real, Tape, Var};
use crate::error::{Error, Result};

/// The primitive catalog, addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Permute,
    Reshape,
    Concat,
    Slice,
    Gather,
    Sum,
    Mean,
    Sqrt,
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Scale,
    Softmax,
    Dropout,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "permute" => Primitive::Permute,
            "reshape" => Primitive::Reshape,
            "concat" => Primitive::Concat,
            "slice" => Primitive::Slice,
            "gather" => Primitive::Gather,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "sqrt" => Primitive::Sqrt,
            "exp" => Primitive::Exp,
            "tanh" => Primitive::Tanh,
            "sigmoid" => Primitive::Sigmoid,
            "relu" => Primitive::Relu,
            "abs" => Primitive::Abs,
            "scale" => Primitive::Scale,
            "softmax" => Primitive::Softmax,
            "dropout" => Primitive::Dropout,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for [`Tape::apply`]; only the ones a primitive reads need be set.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub index: Option<Vec<usize>>,
    pub scale: Option<f64>,
    pub p: Option<f64>,
}

impl<T: Real> Tape<T> {
    /// Runs a primitive by name.
    pub fn apply(&mut self, op: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let prim: Primitive = op.parse()?;
        let arity = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
            Primitive::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{op} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| Error::invalid(format!("{op} needs attribute `{name}`")))
        };
        let x = inputs[0];
        match prim {
            Primitive::Add => self.add(x, inputs[1]),
            Primitive::Sub => self.sub(x, inputs[1]),
            Primitive::Mul => self.mul(x, inputs[1]),
            Primitive::Div => self.div(x, inputs[1]),
            Primitive::MatMul => self.matmul(x, inputs[1]),
            Primitive::Transpose => self.transpose(x),
            Primitive::Permute => {
                let perm = attrs.perm.as_deref().ok_or_else(|| Error::invalid("permute needs `perm`"))?;
                self.permute(x, perm)
            }
            Primitive::Reshape => {
                let shape = attrs.shape.as_deref().ok_or_else(|| Error::invalid("reshape needs `shape`"))?;
                self.reshape(x, shape)
            }
            Primitive::Concat => self.concat(inputs, need(attrs.axis, "axis")?),
            Primitive::Slice => self.slice(
                x,
                need(attrs.axis, "axis")?,
                need(attrs.start, "start")?,
                need(attrs.end, "end")?,
            ),
            Primitive::Gather => {
                let index = attrs.index.as_deref().ok_or_else(|| Error::invalid("gather needs `index`"))?;
                self.gather(x, need(attrs.axis, "axis")?, index)
            }
            Primitive::Sum => self.sum(x, need(attrs.axis, "axis")?),
            Primitive::Mean => self.mean(x, need(attrs.axis, "axis")?),
            Primitive::Sqrt => Ok(self.sqrt(x)),
            Primitive::Exp => Ok(self.exp(x)),
            Primitive::Tanh => Ok(self.tanh(x)),
            Primitive::Sigmoid => Ok(self.sigmoid(x)),
            Primitive::Relu => Ok(self.relu(x)),
            Primitive::Abs => Ok(self.abs(x)),
            Primitive::Scale => {
                let c = attrs.scale.ok_or_else(|| Error::invalid("scale needs `scale`"))?;
                Ok(self.scale(x, T::from_f64(c)))
            }
            Primitive::Softmax => self.softmax(x),
            Primitive::Dropout => self.dropout(x, attrs.p.unwrap_or(0.0)),
        }
    }
}
