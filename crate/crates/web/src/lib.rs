//! Browser bindings: step SPOOF against a victim, breed CPPN images, and
//! compare canvas initializations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spoof_core::encodings::cppn::{CppnGenome, MutationParams};
use spoof_core::oracle::network::{Network, NetworkSpec};
use spoof_core::oracle::weights::Weights;
use spoof_core::oracle::BuiltinOracle;
use spoof_core::spoof::{init_ablation, spoof_attack, AttackConfig, AttackResult};
use spoof_core::{new_canvas, Image, InitMode, OracleHandle};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes for a canvas `ImageData`; one-channel images become gray.
fn rgba(img: &Image) -> Vec<u8> {
    let [c, h, w] = img.shape();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(h * w * 4);
    for row in 0..h {
        for col in 0..w {
            let px = |ch: usize| q(img.data()[img.index_of(ch.min(c - 1), row, col)]);
            out.extend([px(0), px(1), px(2), 255]);
        }
    }
    out
}

/// An MNIST MLP, either untrained or loaded from SPWT bytes.
#[wasm_bindgen]
pub struct Victim {
    network: Network,
    trained: bool,
}

#[wasm_bindgen]
impl Victim {
    /// Freshly initialized weights; attacks still work, just on a weaker model.
    pub fn untrained(seed: u64) -> Victim {
        let spec = NetworkSpec::mnist_mlp();
        let weights = spec.init_weights(seed);
        Victim { network: Network::new(spec, weights).expect("builtin spec"), trained: false }
    }

    /// Weights written by `spoof train` (`weights.spwt`).
    pub fn from_spwt(bytes: &[u8]) -> Result<Victim, JsError> {
        let weights = Weights::from_bytes(bytes).map_err(js_err)?;
        let network = Network::new(NetworkSpec::mnist_mlp(), weights).map_err(js_err)?;
        Ok(Victim { network, trained: true })
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }
}

impl Victim {
    fn oracle(&self) -> OracleHandle {
        OracleHandle::new(BuiltinOracle::new(self.network.clone()))
    }
}

/// A SPOOF run that grows in steps. Each step replays the attack with the
/// larger budget; proposals come from a fixed stream, so the earlier queries
/// are reproduced exactly and the run just continues.
#[wasm_bindgen]
pub struct SpoofSession {
    oracle: OracleHandle,
    config: AttackConfig,
    result: Option<AttackResult>,
    initial: Image,
}

#[wasm_bindgen]
impl SpoofSession {
    #[wasm_bindgen(constructor)]
    pub fn new(victim: &Victim, target: usize, seed: u64, init: &str) -> Result<SpoofSession, JsError> {
        let init: InitMode = init.parse().map_err(js_err)?;
        if target >= victim.num_classes() {
            return Err(JsError::new(&format!("target {target} outside 0..{}", victim.num_classes())));
        }
        let config = AttackConfig::new(target, 0, seed).with_init(init).with_checkpoint_stride(1);
        let [c, h, w] = victim.network.input_shape();
        let initial = new_canvas(c, h, w, init, spoof_core::spoof::canvas_seed(seed, target)).map_err(js_err)?;
        Ok(SpoofSession { oracle: victim.oracle(), config, result: None, initial })
    }

    /// Spends `queries` more proposals; returns the target confidence.
    pub fn step(&mut self, queries: u64) -> Result<f32, JsError> {
        if queries == 0 {
            return Ok(self.confidence());
        }
        self.config.budget += queries;
        let result = spoof_attack(&self.oracle, &self.config).map_err(js_err)?;
        self.result = Some(result);
        Ok(self.confidence())
    }

    pub fn queries(&self) -> u64 {
        self.result.as_ref().map_or(0, |r| r.queries_used)
    }

    pub fn confidence(&self) -> f32 {
        self.result.as_ref().map_or(0.0, |r| r.final_confidence)
    }

    pub fn prediction(&self) -> Option<usize> {
        self.result.as_ref().map(|r| r.final_prediction)
    }

    pub fn accepted(&self) -> u64 {
        self.result.as_ref().map_or(0, |r| r.pixel_changes_accepted)
    }

    pub fn pcr(&self) -> f64 {
        self.result.as_ref().map_or(0.0, |r| r.pcr)
    }

    /// Target confidence at every query so far.
    pub fn trajectory(&self) -> Vec<f32> {
        self.result.as_ref().map_or_else(Vec::new, |r| r.trajectory.iter().map(|p| p.confidence).collect())
    }

    pub fn rgba(&self) -> Vec<u8> {
        rgba(self.result.as_ref().map_or(&self.initial, |r| &r.final_image))
    }
}

/// One CPPN lineage: every mutation replaces the current genome.
#[wasm_bindgen]
pub struct CppnSession {
    genome: CppnGenome,
    rng: ChaCha8Rng,
    channels: usize,
    generation: u64,
}

#[wasm_bindgen]
impl CppnSession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, channels: usize) -> Result<CppnSession, JsError> {
        if channels != 1 && channels != 3 {
            return Err(JsError::new("channels must be 1 or 3"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genome = CppnGenome::minimal(channels, &mut rng);
        Ok(CppnSession { genome, rng, channels, generation: 0 })
    }

    pub fn mutate(&mut self, times: u32) {
        for _ in 0..times {
            self.genome = self.genome.mutate(&MutationParams::default(), &mut self.rng);
            self.generation += 1;
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn hidden_nodes(&self) -> usize {
        self.genome.num_hidden()
    }

    pub fn connections(&self) -> usize {
        self.genome.connections.iter().filter(|c| c.enabled).count()
    }

    pub fn render(&self, size: usize) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.genome.render(size, size, self.channels).map_err(js_err)?))
    }

    /// Probabilities the victim assigns to the 28×28 one-channel rendering.
    pub fn classify(&self, victim: &Victim) -> Result<Vec<f32>, JsError> {
        let [c, h, w] = victim.network.input_shape();
        let img = self.genome.render(h, w, c).map_err(js_err)?;
        let probs = victim.oracle().predict_one(&img).map_err(js_err)?;
        Ok(probs.probs().to_vec())
    }
}

/// Attacks every class from black, white and random canvases; returns the
/// summaries as JSON.
#[wasm_bindgen]
pub fn compare_inits(victim: &Victim, budget: u64, seed: u64) -> Result<String, JsError> {
    let stride = (budget / 20).max(1);
    let summaries = init_ablation(&victim.oracle(), budget, &[seed], stride).map_err(js_err)?;
    serde_json::to_string(&summaries).map_err(js_err)
}
