//! Low-rank adapters on frozen attention projections.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// Adapters may only be placed in the first four blocks of each encoder.
pub const MAX_ADAPTED_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Visual,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    pub fn short(self) -> &'static str {
        match self {
            Self::Query => "wq",
            Self::Key => "wk",
            Self::Value => "wv",
            Self::Output => "wo",
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Self::Query),
            "key" | "k" => Ok(Self::Key),
            "value" | "v" => Ok(Self::Value),
            "output" | "o" => Ok(Self::Output),
            other => Err(Error::Validation(format!("unknown projection `{other}`"))),
        }
    }
}

/// An attention projection that carries an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub encoder: Encoder,
    pub block: usize,
    pub projection: Projection,
}

impl Site {
    pub fn new(encoder: Encoder, block: usize, projection: Projection) -> Result<Self> {
        if block >= MAX_ADAPTED_BLOCKS {
            return Err(Error::Validation(format!(
                "adapter block {block} outside 0..{MAX_ADAPTED_BLOCKS}"
            )));
        }
        Ok(Self {
            encoder,
            block,
            projection,
        })
    }

    /// Name of the frozen weight this site adapts.
    pub fn weight_name(&self) -> String {
        let enc = match self.encoder {
            Encoder::Visual => "visual",
            Encoder::Text => "text",
        };
        format!("{enc}.blocks.{}.attn.{}", self.block, self.projection.short())
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.weight_name())
    }
}

/// `W + scaling · B·A` with `A: [rank, d_in]` and `B: [d_out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    scaling: f64,
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 0.02 / rank)`, `B = 0`, so the delta starts at zero.
    pub fn new<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, scaling: f64, rng: &mut R) -> Result<Self> {
        check_rank(rank, d_out, d_in)?;
        let a = Tensor::randn(&[rank, d_in], 0.02 / rank as f64, rng);
        Self::from_factors(a, Tensor::zeros(&[d_out, rank]), scaling)
    }

    pub fn from_factors(a: Tensor, b: Tensor, scaling: f64) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[1] {
            return shape_err(format!(
                "adapter factors A {:?} and B {:?} do not chain",
                a.shape(),
                b.shape()
            ));
        }
        check_rank(a.shape()[0], b.shape()[0], a.shape()[1])?;
        if !(scaling > 0.0 && scaling.is_finite()) {
            return Err(Error::Validation(format!(
                "adapter scaling must be positive, got {scaling}"
            )));
        }
        Ok(Self { a, b, scaling })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// `scaling · B·A`.
    pub fn delta(&self) -> Tensor {
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank());
        let mut out = vec![0.0; d_out * d_in];
        kernels::gemm_nn(self.b.data(), self.a.data(), &mut out, d_out, r, d_in);
        for v in &mut out {
            *v *= self.scaling;
        }
        Tensor::new(vec![d_out, d_in], out).expect("delta shape")
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::Validation(format!(
            "adapter rank {rank} must lie in 1..={}",
            d_out.min(d_in)
        )));
    }
    Ok(())
}

/// Frozen weight plus the adapter delta. `w` itself is left untouched.
pub fn effective_weight(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w.shape() != [adapter.d_out(), adapter.d_in()] {
        return shape_err(format!(
            "weight {:?} does not match adapter [{}, {}]",
            w.shape(),
            adapter.d_out(),
            adapter.d_in()
        ));
    }
    let delta = adapter.delta();
    let data = w.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Adapter placement and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f64,
    pub projections: Vec<Projection>,
    pub encoders: Vec<Encoder>,
    pub blocks: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            scaling: 1.0,
            projections: Projection::ALL.to_vec(),
            encoders: vec![Encoder::Visual, Encoder::Text],
            blocks: MAX_ADAPTED_BLOCKS,
        }
    }
}

impl LoraConfig {
    pub fn sites(&self) -> Result<Vec<Site>> {
        let mut sites = Vec::new();
        for &encoder in &self.encoders {
            for block in 0..self.blocks {
                for &projection in &self.projections {
                    sites.push(Site::new(encoder, block, projection)?);
                }
            }
        }
        sites.sort();
        sites.dedup();
        Ok(sites)
    }
}

/// All adapters of a model, keyed and iterated in site order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraSet {
    adapters: BTreeMap<Site, LoraAdapter>,
}

impl LoraSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Fresh zero-delta adapters on every configured site of a `d × d` model.
    pub fn init<R: Rng + ?Sized>(config: &LoraConfig, d_model: usize, rng: &mut R) -> Result<Self> {
        let mut set = Self::empty();
        for site in config.sites()? {
            let ad = LoraAdapter::new(d_model, d_model, config.rank, config.scaling, rng)?;
            set.insert(site, ad);
        }
        Ok(set)
    }

    pub fn insert(&mut self, site: Site, adapter: LoraAdapter) {
        self.adapters.insert(site, adapter);
    }

    pub fn get(&self, site: &Site) -> Option<&LoraAdapter> {
        self.adapters.get(site)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &LoraAdapter)> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&Site, &mut LoraAdapter)> {
        self.adapters.iter_mut()
    }

    /// The `A` and `B` factors of every site, in site order.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        self.adapters.values().flat_map(|ad| [&ad.a, &ad.b]).collect()
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_parameters().iter().map(|t| t.len()).sum()
    }

    /// Whether both sets adapt the same sites with the same factor shapes.
    pub fn same_structure(&self, other: &LoraSet) -> bool {
        self.adapters.len() == other.adapters.len()
            && self
                .adapters
                .iter()
                .zip(&other.adapters)
                .all(|((s1, a1), (s2, a2))| s1 == s2 && a1.a.shape() == a2.a.shape() && a1.b.shape() == a2.b.shape())
    }

    /// A copy with every `B` set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for ad in out.adapters.values_mut() {
            ad.b = Tensor::zeros(ad.b.shape());
        }
        out
    }
}

/// Trainable-parameter names in [`LoraSet::trainable_parameters`] order.
pub fn parameter_names(set: &LoraSet) -> Vec<String> {
    set.iter()
        .flat_map(|(site, _)| [format!("{site}.lora_a"), format!("{site}.lora_b")])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_leaves_weight_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let ad = LoraAdapter::new(6, 6, 2, 1.0, &mut rng).unwrap();
        let eff = effective_weight(&w, &ad).unwrap();
        assert!(eff.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hand_outer_product() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let ad = LoraAdapter::from_factors(a, b, 1.0).unwrap();
        let eff = effective_weight(&Tensor::zeros(&[2, 2]), &ad).unwrap();
        assert_eq!(eff.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(LoraAdapter::new(2, 3, 3, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new(2, 3, 0, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new(2, 3, 2, 0.0, &mut rng).is_err());
    }

    #[test]
    fn mismatched_weight_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::new(4, 4, 2, 1.0, &mut rng).unwrap();
        assert!(matches!(
            effective_weight(&Tensor::zeros(&[4, 3]), &ad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn default_placement_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = LoraSet::init(&LoraConfig::default(), 32, &mut rng).unwrap();
        // 2 encoders x 4 blocks x 4 projections
        assert_eq!(set.len(), 32);
        assert_eq!(set.trainable_parameters().len(), 64);
        // per site 2*32 + 32*2
        assert_eq!(set.parameter_count(), 32 * 128);
        assert_eq!(set.parameter_count(), 4096);
        assert!(LoraSet::empty().trainable_parameters().is_empty());
    }

    #[test]
    fn sites_outside_first_blocks_are_rejected() {
        assert!(Site::new(Encoder::Text, 4, Projection::Query).is_err());
        let cfg = LoraConfig {
            blocks: 5,
            ..LoraConfig::default()
        };
        assert!(cfg.sites().is_err());
    }

    #[test]
    fn parameter_order_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let s1 = LoraSet::init(&LoraConfig::default(), 8, &mut r1).unwrap();
        let s2 = LoraSet::init(&LoraConfig::default(), 8, &mut r2).unwrap();
        assert_eq!(s1, s2);
        let names = parameter_names(&s1);
        assert_eq!(names[0], "visual.blocks.0.attn.wq.lora_a");
        assert_eq!(names[1], "visual.blocks.0.attn.wq.lora_b");
    }
}
