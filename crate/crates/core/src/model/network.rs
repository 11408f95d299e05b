use crate::error::{CladError, Result};
use crate::model::config::EncoderKind;
use crate::model::params::{Architecture, ModelParams, DECODER_CHANNELS};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Outputs of one visual forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VisualForward {
    pub z_v: Var,
    /// Post-ReLU output of the last convolutional layer.
    pub activations: Var,
}

/// Materialized visual encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualOutput<S: Scalar = f32> {
    pub z_v: Tensor<S>,
    pub activations: Tensor<S>,
}

/// Parameters placed on a fresh tape, ready for forward passes.
pub struct BoundModel<S: Scalar = f32> {
    pub tape: Tape<S>,
    arch: Architecture,
    names: Vec<&'static str>,
    vars: Vec<Var>,
}

impl<S: Scalar> BoundModel<S> {
    /// `trainable` decides whether parameter gradients are accumulated.
    pub fn new(params: &ModelParams<S>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(name);
            vars.push(if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            });
        }
        BoundModel {
            tape,
            arch: params.arch().clone(),
            names,
            vars,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Parameter handles in layout order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    fn conv_relu(&mut self, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let (w, b) = (self.var(&format!("{layer}.weight")), self.var(&format!("{layer}.bias")));
        let y = self.tape.conv2d(x, w, b, stride, 1)?;
        self.tape.relu(y)
    }

    fn affine(&mut self, x: Var, layer: &str) -> Result<Var> {
        let (w, b) = (self.var(&format!("{layer}.weight")), self.var(&format!("{layer}.bias")));
        let y = self.tape.matmul(w, x)?;
        self.tape.add(y, b)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        let expected = [a.channels, a.image_size, a.image_size];
        if shape.len() != 3 {
            return Err(CladError::dim("encode_image", "rank", 3, shape.len()));
        }
        for (axis, name) in ["channels", "height", "width"].iter().enumerate() {
            if shape[axis] != expected[axis] {
                return Err(CladError::dim("encode_image", *name, expected[axis], shape[axis]));
            }
        }
        Ok(())
    }

    /// Records the image as a leaf; `track_input` makes it (and everything
    /// downstream) differentiable even when the parameters are frozen.
    pub fn encode_image(&mut self, image: &Tensor<S>, track_input: bool) -> Result<VisualForward> {
        self.check_image(image.shape())?;
        let x = if track_input {
            self.tape.param(image.clone())
        } else {
            self.tape.leaf(image.clone())
        };
        self.encode_image_var(x)
    }

    pub fn encode_image_var(&mut self, x: Var) -> Result<VisualForward> {
        self.check_image(self.tape.value(x).shape())?;
        let mut a = self.conv_relu(x, "conv1", 2)?;
        if self.arch.encoder == EncoderKind::Deep {
            a = self.conv_relu(a, "conv2", 2)?;
            a = self.conv_relu(a, "conv3", 2)?;
        }
        let pooled = self.tape.global_avg_pool(a)?;
        let z_v = self.affine(pooled, "proj_v")?;
        Ok(VisualForward { z_v, activations: a })
    }

    /// Mean of token embeddings followed by the text projection.
    pub fn encode_text(&mut self, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(CladError::usage("encode_text needs at least one token"));
        }
        let v = self.arch.vocab_size;
        if let Some(bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(CladError::usage(format!("token id {bad} outside vocabulary of {v}")));
        }
        let table = self.var("token_table");
        let pooled = self.tape.mean_rows(table, tokens)?;
        self.affine(pooled, "proj_t")
    }

    fn check_embedding(&self, op: &'static str, z: Var) -> Result<()> {
        let shape = self.tape.value(z).shape();
        if shape != [self.arch.embed_dim] {
            return Err(CladError::dim(op, "embedding", self.arch.embed_dim, format!("{shape:?}")));
        }
        Ok(())
    }

    pub fn decode_image(&mut self, z_v: Var) -> Result<Var> {
        self.check_embedding("decode_image", z_v)?;
        let side = self.arch.latent_side();
        let seed = self.affine(z_v, "expand")?;
        let mut x = self.tape.reshape(seed, &[DECODER_CHANNELS[0], side, side])?;
        for layer in ["dec1", "dec2"] {
            x = self.tape.upsample_nearest(x, 2)?;
            x = self.conv_relu(x, layer, 1)?;
        }
        x = self.tape.upsample_nearest(x, 2)?;
        let (w, b) = (self.var("dec3.weight"), self.var("dec3.bias"));
        self.tape.conv2d(x, w, b, 1, 1)
    }

    pub fn decode_text(&mut self, z_t: Var) -> Result<Var> {
        self.check_embedding("decode_text", z_t)?;
        self.affine(z_t, "bow_head")
    }
}

pub fn encode_image<S: Scalar>(params: &ModelParams<S>, image: &Tensor<S>) -> Result<VisualOutput<S>> {
    let mut m = BoundModel::new(params, false);
    let f = m.encode_image(image, false)?;
    Ok(VisualOutput {
        z_v: m.tape.value(f.z_v).clone(),
        activations: m.tape.value(f.activations).clone(),
    })
}

pub fn encode_text<S: Scalar>(params: &ModelParams<S>, tokens: &[usize]) -> Result<Tensor<S>> {
    let mut m = BoundModel::new(params, false);
    let z = m.encode_text(tokens)?;
    Ok(m.tape.value(z).clone())
}

pub fn decode_image<S: Scalar>(params: &ModelParams<S>, z_v: &Tensor<S>) -> Result<Tensor<S>> {
    let mut m = BoundModel::new(params, false);
    let z = m.tape.leaf(z_v.clone());
    let img = m.decode_image(z)?;
    Ok(m.tape.value(img).clone())
}

pub fn decode_text<S: Scalar>(params: &ModelParams<S>, z_t: &Tensor<S>) -> Result<Tensor<S>> {
    let mut m = BoundModel::new(params, false);
    let z = m.tape.leaf(z_t.clone());
    let bow = m.decode_text(z)?;
    Ok(m.tape.value(bow).clone())
}
