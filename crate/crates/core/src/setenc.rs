//! Mean-pooled set encoder `r = (1/S) * sum_i h([x_i, y_i])`.

use ndarray::{concatenate, Axis};
use rand::Rng;

use crate::diff::{Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp, MlpSpec, OutputActivation};

/// Pooled representation of a context set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetRepresentation {
    pub r: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SetEncoder {
    pub mlp: Mlp,
    pub x_dim: usize,
    pub y_dim: usize,
    pub d_r: usize,
}

impl SetEncoder {
    /// `depth` stacked `lin+relu` layers of width `d_r`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        x_dim: usize,
        y_dim: usize,
        depth: usize,
        d_r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("set encoder depth must be >= 1".into()));
        }
        let mut widths = vec![x_dim + y_dim];
        widths.extend(std::iter::repeat_n(d_r, depth));
        let spec = MlpSpec::new(widths, Activation::Relu, OutputActivation::Hidden)?;
        Ok(Self {
            mlp: Mlp::new(store, prefix, spec, rng)?,
            x_dim,
            y_dim,
            d_r,
        })
    }

    /// Per-point features `h([x, y])`, one row per pair.
    pub fn features<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        xs: &Matrix,
        ys: &Matrix,
    ) -> Result<Var<'g>> {
        if xs.nrows() != ys.nrows() || xs.ncols() != self.x_dim || ys.ncols() != self.y_dim {
            return Err(Error::Shape {
                op: "set encoder pairs",
                left: xs.dim(),
                right: ys.dim(),
            });
        }
        if xs.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        let pairs = concatenate(Axis(1), &[xs.view(), ys.view()]).expect("row counts checked");
        self.mlp.forward(g, store, g.input(pairs))?.plain()
    }

    /// Mean of the feature rows listed in `rows`, in the given order.
    pub fn pool<'g>(features: Var<'g>, rows: &[usize]) -> Result<Var<'g>> {
        if rows.is_empty() {
            return Err(Error::EmptySet);
        }
        if rows.len() == features.rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(features.column_mean());
        }
        Ok(features.gather_rows(rows).column_mean())
    }

    pub fn encode_set<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        xs: &Matrix,
        ys: &Matrix,
    ) -> Result<Var<'g>> {
        Ok(self.features(g, store, xs, ys)?.column_mean())
    }

    /// Graph-free convenience returning the pooled vector.
    pub fn represent(&self, store: &ParamStore, xs: &Matrix, ys: &Matrix) -> Result<SetRepresentation> {
        let g = Graph::new();
        let r = self.encode_set(&g, store, xs, ys)?;
        let r = r.value().iter().copied().collect();
        Ok(SetRepresentation { r })
    }
}
