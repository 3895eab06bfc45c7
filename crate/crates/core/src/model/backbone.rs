use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::KaimingInit;

/// Backbone output: `C×HW`, one column per spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims2("feature_map")?;
        Ok(FeatureMap { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Cuts a `C_in×H×W` image into non-overlapping `P×P` patches.
///
/// Returns `HW×(C_in·P·P)`: patches in row-major grid order, each flattened
/// channel-major then row-major within the patch.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [c_in, h, w] = image.shape()[..] else {
        return Err(Error::shape(
            "patchify",
            format!("expected C_in×H×W image, got {:?}", image.shape()),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = c_in * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..c_in {
                for dy in 0..patch {
                    let row = (c * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, width], out))
}

/// Patch embedding followed by ReLU; stands in for a deep CNN at toy scale.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    /// `(C_in·P·P)×C`.
    pub proj: Tensor<T>,
    /// `C`, zero-initialised.
    pub bias: Tensor<T>,
    pub patch: usize,
}

impl<T: Scalar> Backbone<T> {
    pub(crate) fn init(channels: usize, patch: usize, in_channels: usize, init: &mut KaimingInit) -> Self {
        let fan_in = in_channels * patch * patch;
        Backbone {
            proj: init.matrix(fan_in, channels, fan_in),
            bias: Tensor::zeros(vec![channels]),
            patch,
        }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        let tape = Tape::new();
        let proj = tape.constant(self.proj.clone());
        let bias = tape.constant(self.bias.clone());
        let f = forward_var(&tape, proj, bias, image, self.patch)?;
        let values = f.value().clone();
        FeatureMap::new(values)
    }
}

/// `relu(patches·proj + bias)ᵀ`, giving the `C×HW` map on the tape.
pub(crate) fn forward_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    proj: Var<'t, T>,
    bias: Var<'t, T>,
    image: &Tensor<T>,
    patch: usize,
) -> Result<Var<'t, T>> {
    let patches = tape.constant(patchify(image, patch)?);
    patches.matmul(proj)?.add_row_vector(bias)?.relu()?.transpose()
}
