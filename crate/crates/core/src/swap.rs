//! Inference-time face swapping with a trained, frozen model.

use std::path::Path;

use styleswap_autograd::{Graph, Scalar, Tensor};

use crate::checkpoint::{model_from_archive, Archive};
use crate::error::{Error, Result};
use crate::networks::{Model, Styles, Trainable};

/// Swap outputs as plain tensors.
#[derive(Debug, Clone)]
pub struct Swapped<T: Scalar> {
    /// Blended image when the mask branch is active, raw generator output otherwise.
    pub image: Tensor<T>,
    pub raw: Tensor<T>,
    /// Final soft mask `[N, 1, R, R]`.
    pub mask: Option<Tensor<T>>,
}

/// Style input of a swap.
#[derive(Debug, Clone)]
pub enum StyleInput<T: Scalar> {
    /// `[N, D]` per target, or `[1, D]` shared; every slot gets the same row.
    Vector(Tensor<T>),
    /// `[2L, D]`, one row per slot, shared by all targets.
    Stack(Tensor<T>),
}

/// A trained model together with whether its mask branch is in use.
#[derive(Debug, Clone)]
pub struct Swapper<T: Scalar> {
    pub model: Model<T>,
    pub mask_enabled: bool,
}

impl<T: Scalar> Swapper<T> {
    pub fn new(model: Model<T>, mask_enabled: bool) -> Self {
        Self { model, mask_enabled }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let (model, header) = model_from_archive(archive)?;
        Ok(Self::new(model, header.mask_enabled))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn resolution(&self) -> usize {
        self.model.config().resolution()
    }

    pub fn style_slots(&self) -> usize {
        self.model.config().generator.style_slots()
    }

    /// `w = FC_w(E_id(source))` for each row of `[N, 3, R, R]`.
    pub fn source_styles(&self, source: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let sess = self.model.bind(&g, Trainable::NONE);
        Ok((*sess.source_style(g.constant(source.clone()))?.value()).clone())
    }

    /// Unit-norm identity embeddings from the frozen training embedder.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let sess = self.model.bind(&g, Trainable::NONE);
        Ok((*sess.embed_identity(g.constant(images.clone()))?.embedding.value()).clone())
    }

    /// Pairwise swaps of equally sized source and target batches.
    pub fn swap(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<Swapped<T>> {
        let w = self.source_styles(source)?;
        self.swap_with_styles(&StyleInput::Vector(w), target)
    }

    /// Generates onto every row of `target`.
    pub fn swap_with_styles(&self, styles: &StyleInput<T>, target: &Tensor<T>) -> Result<Swapped<T>> {
        let g = Graph::new();
        let sess = self.model.bind(&g, Trainable::NONE);
        let (n, slots) = (target.dim(0), self.style_slots());
        let styles = match styles {
            StyleInput::Vector(w) if w.dim(0) == n || w.dim(0) == 1 => Styles::Vector(g.constant(w.clone())),
            StyleInput::Stack(s) if s.dim(0) == slots => Styles::from_rows(g.constant(s.clone()))?,
            StyleInput::Vector(t) | StyleInput::Stack(t) => {
                return Err(Error::Shape {
                    op: "swap_with_styles",
                    detail: format!("styles {:?} for {n} targets and {slots} slots", t.shape()),
                })
            }
        };
        let t = g.constant(target.clone());
        let attrs = sess.encode_attributes(t)?;
        let out = sess.generate(&attrs, &styles, t, self.mask_enabled)?;
        Ok(Swapped {
            image: (*out.result().value()).clone(),
            raw: (*out.image.value()).clone(),
            mask: out.final_mask().map(|m| (*m.value()).clone()),
        })
    }
}
