//! Fully-connected shared trunk: ReLU on hidden layers, linear final layer.

use crate::error::{Error, Result};

use super::{Bindings, Matrix, ParamStore, SeedRng, Tape, Var};

pub fn weight_name(layer: usize) -> String {
    format!("trunk.{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("trunk.{layer}.bias")
}

/// Validates `dims` (input dim first) and returns the number of layers.
pub fn layer_count(dims: &[usize]) -> Result<usize> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("trunk dims {dims:?}")));
    }
    Ok(dims.len() - 1)
}

/// Inserts He-initialized trunk weights and zero biases into `store`.
pub fn init_trunk(store: &mut ParamStore, dims: &[usize], rng: &mut SeedRng) -> Result<()> {
    for l in 0..layer_count(dims)? {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.normal() * std);
        store.insert(weight_name(l), w)?;
        store.insert(bias_name(l), Matrix::zeros(1, fan_out))?;
    }
    Ok(())
}

fn check_layer(l: usize, w: &Matrix, b: &Matrix, in_cols: usize, dims: &[usize]) -> Result<()> {
    let expected = (dims[l], dims[l + 1]);
    if w.shape() != expected || b.shape() != (1, dims[l + 1]) {
        return Err(Error::dim(
            format!("trunk layer {l} parameters"),
            format!("{}x{} weight", expected.0, expected.1),
            format!("{} weight, {} bias", w.shape_str(), b.shape_str()),
        ));
    }
    if in_cols != dims[l] {
        return Err(Error::dim(
            format!("trunk layer {l} input"),
            dims[l],
            in_cols,
        ));
    }
    Ok(())
}

fn layer_params(params: &ParamStore, l: usize) -> Result<(&Matrix, &Matrix)> {
    let get = |name: String| {
        params
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    };
    Ok((get(weight_name(l))?, get(bias_name(l))?))
}

/// Activations of every layer, final embedding last. A pure function of its
/// arguments.
pub fn forward_trunk(params: &ParamStore, inputs: &Matrix, dims: &[usize]) -> Result<Vec<Matrix>> {
    let n_layers = layer_count(dims)?;
    let mut acts: Vec<Matrix> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (w, b) = layer_params(params, l)?;
        let x = acts.last().unwrap_or(inputs);
        check_layer(l, w, b, x.cols(), dims)?;
        let mut z = x.matmul(w)?;
        let cols = z.cols();
        for (k, v) in z.data_mut().iter_mut().enumerate() {
            *v += b.get(0, k % cols);
            if l + 1 < n_layers {
                *v = v.max(0.0);
            }
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Tape-recorded version of [`forward_trunk`]; produces bit-identical values.
pub fn forward_trunk_var(
    tape: &mut Tape,
    bound: &Bindings,
    inputs: Var,
    dims: &[usize],
) -> Result<Vec<Var>> {
    let n_layers = layer_count(dims)?;
    let mut acts: Vec<Var> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (w, b) = (bound.get(&weight_name(l))?, bound.get(&bias_name(l))?);
        let x = acts.last().copied().unwrap_or(inputs);
        check_layer(l, tape.value(w), tape.value(b), tape.value(x).cols(), dims)?;
        let z = tape.matmul(x, w)?;
        let mut z = tape.add_bias(z, b)?;
        if l + 1 < n_layers {
            z = tape.relu(z);
        }
        acts.push(z);
    }
    Ok(acts)
}
