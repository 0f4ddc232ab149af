//! Two-branch hash networks with tanh heads and per-modality classifiers.
//!
//! Each modality has its own stack of fully connected layers (ReLU on
//! hidden layers, tanh on the output) producing continuous codes in
//! (-1, 1)^L, plus a linear-plus-sigmoid classifier over the codes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{Matrix, Tape, Var};

/// Which branch of the model an input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Layer counts and widths for one modality branch.
///
/// `num_layers` counts fully connected layers in total: `num_layers - 1`
/// hidden layers of `hidden_dim` units with ReLU, then a final projection
/// to `code_length` with tanh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub code_length: usize,
    pub num_layers: usize,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("num_layers must be at least 1"));
        }
        if self.code_length < 8 {
            return Err(Error::config("code_length must be at least 8"));
        }
        if self.hidden_dim < self.code_length {
            return Err(Error::config("hidden_dim must be at least code_length"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        Ok(())
    }

    /// (fan_in, fan_out) for each layer in order.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers);
        let mut prev = self.input_dim;
        for _ in 0..self.num_layers - 1 {
            dims.push((prev, self.hidden_dim));
            prev = self.hidden_dim;
        }
        dims.push((prev, self.code_length));
        dims
    }
}

/// One fully connected layer: `x @ weight + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Full model: two hash branches and two classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashModel {
    pub image_config: BranchConfig,
    pub text_config: BranchConfig,
    pub num_classes: usize,
    image_branch: Vec<Layer>,
    text_branch: Vec<Layer>,
    classifier_image: Layer,
    classifier_text: Layer,
}

/// Model configuration handed to [`HashModel::init`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: BranchConfig,
    pub text: BranchConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.code_length != self.text.code_length {
            return Err(Error::config(format!(
                "branches must share one code length, got {} and {}",
                self.image.code_length, self.text.code_length
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        Ok(())
    }
}

fn glorot_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Layer {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Layer {
        weight: Matrix::from_vec(fan_in, fan_out, data).expect("sampled weights are finite"),
        bias: Matrix::zeros(1, fan_out),
    }
}

impl HashModel {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<HashModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = |rng: &mut ChaCha8Rng, cfg: &BranchConfig| {
            cfg.layer_dims()
                .into_iter()
                .map(|(fi, fo)| glorot_layer(rng, fi, fo))
                .collect::<Vec<_>>()
        };
        let image_branch = branch(&mut rng, &config.image);
        let text_branch = branch(&mut rng, &config.text);
        let classifier_image = glorot_layer(&mut rng, config.image.code_length, config.num_classes);
        let classifier_text = glorot_layer(&mut rng, config.text.code_length, config.num_classes);
        Ok(HashModel {
            image_config: config.image.clone(),
            text_config: config.text.clone(),
            num_classes: config.num_classes,
            image_branch,
            text_branch,
            classifier_image,
            classifier_text,
        })
    }

    pub fn code_length(&self) -> usize {
        self.image_config.code_length
    }

    fn branch(&self, modality: Modality) -> (&BranchConfig, &[Layer]) {
        match modality {
            Modality::Image => (&self.image_config, &self.image_branch),
            Modality::Text => (&self.text_config, &self.text_branch),
        }
    }

    fn classifier(&self, modality: Modality) -> &Layer {
        match modality {
            Modality::Image => &self.classifier_image,
            Modality::Text => &self.classifier_text,
        }
    }

    /// Continuous codes for a feature batch, entries strictly in (-1, 1).
    pub fn forward(&self, modality: Modality, x: &Matrix) -> Result<Matrix> {
        let (cfg, layers) = self.branch(modality);
        if x.cols() != cfg.input_dim {
            return Err(Error::shape(format!(
                "{modality:?} branch expects {} features, got {}",
                cfg.input_dim,
                x.cols()
            )));
        }
        let mut h = x.clone();
        for (li, layer) in layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            for i in 0..z.rows() {
                for (v, &b) in z.row_mut(i).iter_mut().zip(layer.bias.row(0)) {
                    *v += b;
                }
            }
            h = if li + 1 == layers.len() {
                z.map(f64::tanh)
            } else {
                z.map(|v| v.max(0.0))
            };
        }
        Ok(h)
    }

    /// Class probabilities `sigmoid(h @ W + b)` for codes `h`.
    pub fn classify(&self, modality: Modality, h: &Matrix) -> Result<Matrix> {
        let layer = self.classifier(modality);
        if h.cols() != layer.weight.rows() {
            return Err(Error::shape(format!(
                "classifier expects code length {}, got {}",
                layer.weight.rows(),
                h.cols()
            )));
        }
        let mut z = h.matmul(&layer.weight)?;
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(layer.bias.row(0)) {
                *v += b;
            }
        }
        Ok(z.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    /// Parameter blocks in a fixed order, with stable names for diagnostics.
    pub fn param_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut blocks = Vec::new();
        for (prefix, layers) in [("image", &self.image_branch), ("text", &self.text_branch)] {
            for (i, layer) in layers.iter().enumerate() {
                blocks.push((format!("{prefix}.{i}.weight"), &layer.weight));
                blocks.push((format!("{prefix}.{i}.bias"), &layer.bias));
            }
        }
        blocks.push(("classifier_image.weight".into(), &self.classifier_image.weight));
        blocks.push(("classifier_image.bias".into(), &self.classifier_image.bias));
        blocks.push(("classifier_text.weight".into(), &self.classifier_text.weight));
        blocks.push(("classifier_text.bias".into(), &self.classifier_text.bias));
        blocks
    }

    /// Mutable parameter blocks in the same order as [`Self::param_blocks`].
    pub fn param_blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut blocks = Vec::new();
        for layers in [&mut self.image_branch, &mut self.text_branch] {
            for layer in layers.iter_mut() {
                blocks.push(&mut layer.weight);
                blocks.push(&mut layer.bias);
            }
        }
        blocks.push(&mut self.classifier_image.weight);
        blocks.push(&mut self.classifier_image.bias);
        blocks.push(&mut self.classifier_text.weight);
        blocks.push(&mut self.classifier_text.bias);
        blocks
    }

    /// Sets both classifier bias vectors to the logit of each class's
    /// prior frequency, clamped to [-10, 10].
    ///
    /// With few optimizer steps at a small learning rate, zero biases
    /// cannot reach the prior offset and the codes absorb the
    /// miscalibration instead; warm-starting the biases removes that
    /// burden from the hash branches.
    pub fn calibrate_classifier_biases(&mut self, class_priors: &[f64]) -> Result<()> {
        if class_priors.len() != self.num_classes {
            return Err(Error::shape(format!(
                "{} priors for {} classes",
                class_priors.len(),
                self.num_classes
            )));
        }
        let logits: Vec<f64> = class_priors
            .iter()
            .map(|&p| {
                let p = p.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln().clamp(-10.0, 10.0)
            })
            .collect();
        for cls in [&mut self.classifier_image, &mut self.classifier_text] {
            cls.bias = Matrix::from_row(&logits);
        }
        Ok(())
    }

    /// Registers every parameter on `tape` for a differentiable pass.
    pub fn record(&self, tape: &Tape) -> TapedModel {
        let record_layers = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| TapedLayer {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                })
                .collect::<Vec<_>>()
        };
        TapedModel {
            tape: tape.clone(),
            image_branch: record_layers(&self.image_branch),
            text_branch: record_layers(&self.text_branch),
            classifier_image: TapedLayer {
                weight: tape.leaf(self.classifier_image.weight.clone()),
                bias: tape.leaf(self.classifier_image.bias.clone()),
            },
            classifier_text: TapedLayer {
                weight: tape.leaf(self.classifier_text.weight.clone()),
                bias: tape.leaf(self.classifier_text.bias.clone()),
            },
        }
    }

    fn validate_loaded(&self) -> Result<()> {
        let cfg = ModelConfig {
            image: self.image_config.clone(),
            text: self.text_config.clone(),
            num_classes: self.num_classes,
        };
        cfg.validate()?;
        for (cfg, layers) in [
            (&self.image_config, &self.image_branch),
            (&self.text_config, &self.text_branch),
        ] {
            let dims = cfg.layer_dims();
            if dims.len() != layers.len() {
                return Err(Error::config("checkpoint layer count mismatch"));
            }
            for ((fi, fo), layer) in dims.iter().zip(layers) {
                if layer.weight.shape() != (*fi, *fo) || layer.bias.shape() != (1, *fo) {
                    return Err(Error::config("checkpoint layer shape mismatch"));
                }
            }
        }
        for (cfg, cls) in [
            (&self.image_config, &self.classifier_image),
            (&self.text_config, &self.classifier_text),
        ] {
            if cls.weight.shape() != (cfg.code_length, self.num_classes)
                || cls.bias.shape() != (1, self.num_classes)
            {
                return Err(Error::config("checkpoint classifier shape mismatch"));
            }
        }
        Ok(())
    }

    /// Writes the full model to a JSON checkpoint; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::config(format!("checkpoint encode: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HashModel> {
        let text = fs::read_to_string(path)?;
        let model: HashModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        model.validate_loaded()?;
        Ok(model)
    }
}

/// One layer registered on a tape.
pub struct TapedLayer {
    pub weight: Var,
    pub bias: Var,
}

impl TapedLayer {
    fn apply(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }
}

/// A model's parameters as tape leaves plus differentiable forward passes.
pub struct TapedModel {
    tape: Tape,
    image_branch: Vec<TapedLayer>,
    text_branch: Vec<TapedLayer>,
    classifier_image: TapedLayer,
    classifier_text: TapedLayer,
}

impl TapedModel {
    /// Continuous codes for a feature batch, recorded on the tape.
    pub fn forward(&self, modality: Modality, x: &Matrix) -> Result<Var> {
        let layers = match modality {
            Modality::Image => &self.image_branch,
            Modality::Text => &self.text_branch,
        };
        if x.cols() != layers[0].weight.shape().0 {
            return Err(Error::shape(format!(
                "{modality:?} branch expects {} features, got {}",
                layers[0].weight.shape().0,
                x.cols()
            )));
        }
        let mut h = self.tape.leaf(x.clone());
        for (li, layer) in layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            h = if li + 1 == layers.len() {
                z.tanh()
            } else {
                z.relu()
            };
        }
        Ok(h)
    }

    /// Class probabilities for taped codes.
    pub fn classify(&self, modality: Modality, h: &Var) -> Result<Var> {
        let cls = match modality {
            Modality::Image => &self.classifier_image,
            Modality::Text => &self.classifier_text,
        };
        Ok(cls.apply(h)?.sigmoid())
    }

    /// Parameter vars in the same order as [`HashModel::param_blocks`].
    pub fn param_vars(&self) -> Vec<&Var> {
        let mut vars = Vec::new();
        for layers in [&self.image_branch, &self.text_branch] {
            for layer in layers {
                vars.push(&layer.weight);
                vars.push(&layer.bias);
            }
        }
        vars.push(&self.classifier_image.weight);
        vars.push(&self.classifier_image.bias);
        vars.push(&self.classifier_text.weight);
        vars.push(&self.classifier_text.bias);
        vars
    }
}
