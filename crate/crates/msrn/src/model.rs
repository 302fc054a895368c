//! The full parameter bundle: encoder, relation head, scale selector and the
//! two self-supervised heads, with a stable naming scheme shared by the
//! optimizer and the checkpoint format.

use crate::encoder::{EncoderParams, EncoderVars};
use crate::heads::{
    DiscrepancyDiscriminatorParams, ScaleDiscriminatorParams, ScaleDiscriminatorVars,
};
use crate::relation::{PairNetVars, RelationParams};
use crate::rng::Rng;
use crate::selector::{SelectorParams, SelectorVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Model {
    pub encoder: EncoderParams,
    pub relation: RelationParams,
    pub selector: SelectorParams,
    pub sd: ScaleDiscriminatorParams,
    pub dd: DiscrepancyDiscriminatorParams,
}

impl Model {
    pub fn init(in_channels: usize, scale_count: usize, rng: &mut Rng) -> Self {
        Model {
            encoder: EncoderParams::init(in_channels, rng),
            relation: RelationParams::init(rng),
            selector: SelectorParams::init(),
            sd: ScaleDiscriminatorParams::init(scale_count, rng),
            dd: DiscrepancyDiscriminatorParams::init(scale_count, rng),
        }
    }

    pub fn scale_count(&self) -> usize {
        self.sd.scale_count()
    }

    /// Named parameters in a fixed order; the optimizer slots and checkpoint
    /// records both follow it.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            out.push((format!("encoder.block{}.weight", i + 1), &b.weight));
            out.push((format!("encoder.block{}.bias", i + 1), &b.bias));
        }
        let rel = &self.relation.net;
        out.push(("relation.conv.weight".into(), &rel.conv_w));
        out.push(("relation.conv.bias".into(), &rel.conv_b));
        out.push(("relation.fc1.weight".into(), &rel.fc1_w));
        out.push(("relation.fc1.bias".into(), &rel.fc1_b));
        out.push(("relation.fc2.weight".into(), &rel.fc2_w));
        out.push(("relation.fc2.bias".into(), &rel.fc2_b));
        out.push(("selector.gain".into(), &self.selector.gain));
        out.push(("selector.bias".into(), &self.selector.bias));
        for (i, (w, b)) in self.sd.layers.iter().enumerate() {
            out.push((format!("sd.fc{}.weight", i + 1), w));
            out.push((format!("sd.fc{}.bias", i + 1), b));
        }
        let dd = &self.dd.net;
        out.push(("dd.conv.weight".into(), &dd.conv_w));
        out.push(("dd.conv.bias".into(), &dd.conv_b));
        out.push(("dd.fc1.weight".into(), &dd.fc1_w));
        out.push(("dd.fc1.bias".into(), &dd.fc1_b));
        out.push(("dd.fc2.weight".into(), &dd.fc2_w));
        out.push(("dd.fc2.bias".into(), &dd.fc2_b));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            out.push((format!("encoder.block{}.weight", i + 1), &mut b.weight));
            out.push((format!("encoder.block{}.bias", i + 1), &mut b.bias));
        }
        let rel = &mut self.relation.net;
        out.push(("relation.conv.weight".into(), &mut rel.conv_w));
        out.push(("relation.conv.bias".into(), &mut rel.conv_b));
        out.push(("relation.fc1.weight".into(), &mut rel.fc1_w));
        out.push(("relation.fc1.bias".into(), &mut rel.fc1_b));
        out.push(("relation.fc2.weight".into(), &mut rel.fc2_w));
        out.push(("relation.fc2.bias".into(), &mut rel.fc2_b));
        out.push(("selector.gain".into(), &mut self.selector.gain));
        out.push(("selector.bias".into(), &mut self.selector.bias));
        for (i, (w, b)) in self.sd.layers.iter_mut().enumerate() {
            out.push((format!("sd.fc{}.weight", i + 1), w));
            out.push((format!("sd.fc{}.bias", i + 1), b));
        }
        let dd = &mut self.dd.net;
        out.push(("dd.conv.weight".into(), &mut dd.conv_w));
        out.push(("dd.conv.bias".into(), &mut dd.conv_b));
        out.push(("dd.fc1.weight".into(), &mut dd.fc1_w));
        out.push(("dd.fc1.bias".into(), &mut dd.fc1_b));
        out.push(("dd.fc2.weight".into(), &mut dd.fc2_w));
        out.push(("dd.fc2.bias".into(), &mut dd.fc2_b));
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Binds every parameter onto the tape. The returned leaf list is in
    /// `entries` order so gradients can be zipped against optimizer slots.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> (ModelVars, Vec<Var>) {
        let encoder = self.encoder.bind(tape, requires_grad);
        let relation = self.relation.bind(tape, requires_grad);
        let selector = self.selector.bind(tape, requires_grad);
        let sd = self.sd.bind(tape, requires_grad);
        let dd = self.dd.bind(tape, requires_grad);
        let mut ordered = Vec::new();
        for (w, b) in &encoder.blocks {
            ordered.push(*w);
            ordered.push(*b);
        }
        ordered.extend([
            relation.conv_w,
            relation.conv_b,
            relation.fc1_w,
            relation.fc1_b,
            relation.fc2_w,
            relation.fc2_b,
            selector.gain,
            selector.bias,
        ]);
        for (w, b) in &sd.layers {
            ordered.push(*w);
            ordered.push(*b);
        }
        ordered.extend([dd.conv_w, dd.conv_b, dd.fc1_w, dd.fc1_b, dd.fc2_w, dd.fc2_b]);
        (ModelVars { encoder, relation, selector, sd, dd }, ordered)
    }
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub relation: PairNetVars,
    pub selector: SelectorVars,
    pub sd: ScaleDiscriminatorVars,
    pub dd: PairNetVars,
}

impl ModelVars {
    /// Rebuilds the structured view from leaves laid out in `entries` order
    /// (4 encoder blocks, relation pair net, selector affine, 3 scale-head
    /// layers, discrepancy pair net).
    pub fn from_ordered(vars: &[Var]) -> ModelVars {
        assert_eq!(vars.len(), 28, "expected 28 parameter leaves");
        let pair = |base: usize| PairNetVars {
            conv_w: vars[base],
            conv_b: vars[base + 1],
            fc1_w: vars[base + 2],
            fc1_b: vars[base + 3],
            fc2_w: vars[base + 4],
            fc2_b: vars[base + 5],
        };
        ModelVars {
            encoder: EncoderVars {
                blocks: (0..4).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
            },
            relation: pair(8),
            selector: SelectorVars { gain: vars[14], bias: vars[15] },
            sd: ScaleDiscriminatorVars {
                layers: vec![(vars[16], vars[17]), (vars[18], vars[19]), (vars[20], vars[21])],
            },
            dd: pair(22),
        }
    }
}
