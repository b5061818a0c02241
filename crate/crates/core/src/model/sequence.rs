use super::vocab::{LVR_END, LVR_START};
use crate::error::{LvrError, Result};
use crate::numerics::Real;

/// One input position of an interleaved sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum MixedElement<S> {
    TextToken(u32),
    VisualEmbed(Vec<S>),
    LatentInput(Vec<S>),
}

impl<S> MixedElement<S> {
    pub fn token(&self) -> Option<u32> {
        match self {
            MixedElement::TextToken(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, MixedElement::LatentInput(_))
    }
}

/// An element plus the supervision attached to the output at its position.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedItem<S> {
    pub input: MixedElement<S>,
    pub text_target: Option<u32>,
    pub latent_target: Option<LatentTarget<S>>,
    pub switch_target: Option<u8>,
}

/// Reconstruction target of one output position.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentTarget<S> {
    Visual(Vec<S>),
    /// The trainable latent-end anchor.
    EndAnchor,
}

impl<S> MixedItem<S> {
    pub fn plain(input: MixedElement<S>) -> Self {
        MixedItem { input, text_target: None, latent_target: None, switch_target: None }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MixedSequence<S> {
    pub items: Vec<MixedItem<S>>,
}

impl<S: Real> MixedSequence<S> {
    pub fn new() -> Self {
        MixedSequence { items: Vec::new() }
    }

    /// Same sequence with every vector converted to `T`.
    pub fn cast<T: Real>(&self) -> MixedSequence<T> {
        let c = |v: &Vec<S>| v.iter().map(|x| T::of(x.f64())).collect::<Vec<T>>();
        let items = self
            .items
            .iter()
            .map(|it| MixedItem {
                input: match &it.input {
                    MixedElement::TextToken(t) => MixedElement::TextToken(*t),
                    MixedElement::VisualEmbed(v) => MixedElement::VisualEmbed(c(v)),
                    MixedElement::LatentInput(v) => MixedElement::LatentInput(c(v)),
                },
                text_target: it.text_target,
                latent_target: it.latent_target.as_ref().map(|t| match t {
                    LatentTarget::Visual(v) => LatentTarget::Visual(c(v)),
                    LatentTarget::EndAnchor => LatentTarget::EndAnchor,
                }),
                switch_target: it.switch_target,
            })
            .collect();
        MixedSequence { items }
    }

    pub fn from_elements(elements: Vec<MixedElement<S>>) -> Self {
        MixedSequence { items: elements.into_iter().map(MixedItem::plain).collect() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, input: MixedElement<S>) -> &mut MixedItem<S> {
        self.items.push(MixedItem::plain(input));
        self.items.last_mut().expect("just pushed")
    }

    pub fn elements(&self) -> impl Iterator<Item = &MixedElement<S>> {
        self.items.iter().map(|i| &i.input)
    }

    /// Checks the latent-block invariant and the length bound. Latent targets
    /// may sit on an `<|lvr_start|>` element or anywhere after it, up to (not
    /// including) the matching `<|lvr_end|>`.
    pub fn validate(&self, max_len: usize, d_model: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(LvrError::Capacity(format!("sequence of {} exceeds max_seq_len {max_len}", self.len())));
        }
        let mut in_block = false;
        for (i, item) in self.items.iter().enumerate() {
            match &item.input {
                MixedElement::TextToken(LVR_START) => in_block = true,
                MixedElement::TextToken(LVR_END) => in_block = false,
                MixedElement::VisualEmbed(v) | MixedElement::LatentInput(v) if v.len() != d_model => {
                    return Err(LvrError::dim("mixed_sequence", format!("vector at {i} has width {}", v.len())));
                }
                _ => {}
            }
            if item.latent_target.is_some() && !in_block {
                return Err(LvrError::Contract(format!("latent target at position {i} outside a latent block")));
            }
            if let Some(LatentTarget::Visual(v)) = &item.latent_target {
                if v.len() != d_model {
                    return Err(LvrError::dim("mixed_sequence", format!("latent target at {i} has width {}", v.len())));
                }
            }
        }
        Ok(())
    }
}
