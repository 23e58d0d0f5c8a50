//! Probability providers: anything that can turn a prompt plus a symbol
//! history into a distribution over the next subpixel value.
//!
//! Built-in providers are small adaptive counting models that run in-process.
//! Remote providers talk to a language-model server over the length-prefixed
//! wire protocol in [`wire`]; the server gathers the 256 digital-token logits
//! and the client turns them into a [`Pmf256`] with a stable softmax.

mod builtin;
pub mod remote;
pub mod server;
pub mod wire;

use std::sync::Arc;

pub use builtin::{AdaptiveModel, AdaptiveSession};
pub use remote::{Endpoint, RemoteProvider};

use crate::error::{Error, Result};
use crate::image::OrderingMode;
use crate::token::{DigitalTokenMap, PromptConfig};

/// Tolerance on the total mass of a [`Pmf256`].
pub const PMF_SUM_TOLERANCE: f64 = 1e-9;

/// Distribution over the 256 subpixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf256 {
    p: [f64; 256],
}

impl Pmf256 {
    pub fn new(p: [f64; 256]) -> Result<Self> {
        let mut sum = 0.0;
        for (z, &v) in p.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::CorruptProviderOutput(format!(
                    "probability of {z} is {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PMF_SUM_TOLERANCE {
            return Err(Error::CorruptProviderOutput(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self { p })
    }

    pub fn uniform() -> Self {
        Self {
            p: [1.0 / 256.0; 256],
        }
    }

    pub fn probabilities(&self) -> &[f64; 256] {
        &self.p
    }

    pub fn get(&self, symbol: u8) -> f64 {
        self.p[symbol as usize]
    }

    /// Most likely symbol, lowest value on ties.
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for z in 1..256 {
            if self.p[z] > self.p[best] {
                best = z;
            }
        }
        best as u8
    }
}

/// Raw logits over a provider vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl From<Vec<f32>> for LogitVector {
    fn from(v: Vec<f32>) -> Self {
        LogitVector(v.into_iter().map(f64::from).collect())
    }
}

impl From<Vec<f64>> for LogitVector {
    fn from(v: Vec<f64>) -> Self {
        LogitVector(v)
    }
}

/// Picks the logits of the 256 digital tokens out of a full-vocabulary vector.
pub fn gather_logits<T: Copy>(logits: &[T], map: &DigitalTokenMap) -> Result<[T; 256]> {
    let mut out = [logits
        .first()
        .copied()
        .ok_or_else(|| Error::CorruptProviderOutput("empty logit vector".into()))?;
        256];
    for (z, slot) in out.iter_mut().enumerate() {
        let id = map.forward(z as u8) as usize;
        *slot = *logits.get(id).ok_or_else(|| {
            Error::CorruptProviderOutput(format!(
                "digital token id {id} outside a vocabulary of {}",
                logits.len()
            ))
        })?;
    }
    Ok(out)
}

/// Softmax over 256 gathered logits, max-subtracted before exponentiation.
pub fn softmax256(logits: &[f64; 256]) -> Result<Pmf256> {
    if let Some(z) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::CorruptProviderOutput(format!(
            "non-finite logit {} for value {z}",
            logits[z]
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; 256];
    let mut sum = 0.0;
    for (slot, &y) in p.iter_mut().zip(logits) {
        *slot = (y - max).exp();
        sum += *slot;
    }
    for slot in p.iter_mut() {
        *slot /= sum;
    }
    Pmf256::new(p)
}

/// Gathers the digital-token logits and normalizes them. Tokens outside the
/// digital dictionary get no mass.
pub fn sample_distribution(logits: &LogitVector, map: &DigitalTokenMap) -> Result<Pmf256> {
    softmax256(&gather_logits(&logits.0, map)?)
}

/// Source of next-symbol distributions.
pub trait ProbabilityProvider: Send + Sync {
    /// Short human-readable name, e.g. `builtin:order1`.
    fn name(&self) -> String;

    /// Identifies the model; recorded in containers to catch decoder mismatch.
    fn fingerprint(&self) -> u64;

    fn token_map(&self) -> &DigitalTokenMap;

    /// Maximum prompt plus symbol tokens a session may hold.
    fn context_window(&self) -> usize;

    /// Whether identical (prompt, context) always yields a bit-identical PMF.
    fn is_deterministic(&self) -> bool;

    /// Number of tokens the prompt occupies for a session on `channel`.
    fn prompt_tokens(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<usize>;

    fn begin(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<Box<dyn ProviderSession>>;
}

/// Conditioning state for one coded sequence. Sessions are used by one
/// worker at a time.
pub trait ProviderSession: Send {
    /// Distribution of the next symbol given the prompt and all observed symbols.
    fn next_pmf(&mut self) -> Result<Pmf256>;

    /// Appends a symbol to the context.
    fn observe(&mut self, symbol: u8);

    /// Prompt tokens installed at `begin`.
    fn prompt_len(&self) -> usize;

    /// Symbols observed so far.
    fn context_len(&self) -> usize;

    /// Independent copy with the same prompt and history.
    fn fork(&self) -> Result<Box<dyn ProviderSession>>;
}

/// Both sides of the chain-rule factorization for one candidate pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factorization {
    /// Probability of the whole pixel from one sequential pass.
    pub joint: f64,
    /// Product of the three per-channel conditionals.
    pub product: f64,
    pub conditionals: [f64; 3],
}

/// Evaluates `rho(r|ctx) * rho(g|ctx,r) * rho(b|ctx,r,g)` term by term on one
/// session and the probability of the pixel as a single sequential pass on a
/// fork of it.
pub fn joint_conditional_factorization_check(
    provider: &dyn ProbabilityProvider,
    prompt: &PromptConfig,
    pixel_context: &[u8],
    candidate: [u8; 3],
) -> Result<Factorization> {
    if !provider.is_deterministic() {
        return Err(Error::UnsupportedCheck(format!(
            "{} is not deterministic",
            provider.name()
        )));
    }
    let mut session = provider.begin(prompt, OrderingMode::ChannelJoint, None)?;
    for &s in pixel_context {
        session.observe(s);
    }
    let mut joint_session = session.fork()?;

    let mut conditionals = [0.0; 3];
    for (k, &s) in candidate.iter().enumerate() {
        conditionals[k] = session.next_pmf()?.get(s);
        session.observe(s);
    }
    let product = conditionals[0] * conditionals[1] * conditionals[2];

    let mut joint = 1.0;
    for &s in &candidate {
        joint *= joint_session.next_pmf()?.get(s);
        joint_session.observe(s);
    }
    Ok(Factorization {
        joint,
        product,
        conditionals,
    })
}

/// Parses a provider spec:
/// `builtin:order0|order1|order2[:alpha=A]`, `remote:<host:port>` or
/// `remote:stdio:<command line>`.
pub fn from_spec(spec: &str) -> Result<Arc<dyn ProbabilityProvider>> {
    if let Some(rest) = spec.strip_prefix("builtin:") {
        let mut parts = rest.split(':');
        let order = match parts.next() {
            Some("order0") => 0,
            Some("order1") => 1,
            Some("order2") => 2,
            other => {
                return Err(Error::Config(format!(
                    "unknown builtin model {other:?}, expected order0, order1 or order2"
                )))
            }
        };
        let mut alpha = builtin::DEFAULT_ALPHA;
        for opt in parts {
            match opt.split_once('=') {
                Some(("alpha", v)) => {
                    alpha = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad smoothing value `{v}`")))?
                }
                _ => return Err(Error::Config(format!("unknown builtin option `{opt}`"))),
            }
        }
        return Ok(Arc::new(AdaptiveModel::new(order, alpha)?));
    }
    if let Some(rest) = spec.strip_prefix("remote:") {
        let endpoint = match rest.strip_prefix("stdio:") {
            Some(cmd) => Endpoint::Command(cmd.to_string()),
            None => Endpoint::Tcp(rest.to_string()),
        };
        return Ok(Arc::new(RemoteProvider::connect(endpoint, true)?));
    }
    Err(Error::Config(format!(
        "unknown provider `{spec}`, expected builtin:orderN or remote:<addr>"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_validation() {
        assert!(Pmf256::new([1.0 / 256.0; 256]).is_ok());
        let mut p = [0.0; 256];
        p[4] = 1.0;
        assert!(Pmf256::new(p).is_ok());
        p[5] = 1e-8;
        assert!(Pmf256::new(p).is_err());
        p[5] = 0.0;
        p[6] = -0.0;
        assert!(Pmf256::new(p).is_ok());
        p[4] = f64::NAN;
        assert!(Pmf256::new(p).is_err());
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        let pmf = softmax256(&[3.25; 256]).unwrap();
        assert!(pmf
            .probabilities()
            .iter()
            .all(|&v| (v - 1.0 / 256.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        // logit ln 2 at value 1, ln 1 elsewhere: p[1] = 2/257, others 1/257
        let mut y = [0.0; 256];
        y[1] = 2f64.ln();
        let pmf = softmax256(&y).unwrap();
        assert!((pmf.get(1) - 2.0 / 257.0).abs() < 1e-15);
        assert!((pmf.get(0) - 1.0 / 257.0).abs() < 1e-15);
        assert!((pmf.get(2) - 1.0 / 257.0).abs() < 1e-15);
        assert_eq!(pmf.argmax(), 1);
    }

    #[test]
    fn gather_through_map() {
        let map = DigitalTokenMap::build(|s| vec![1000 + s.parse::<u32>().unwrap()]).unwrap();
        let mut full = vec![50.0f64; 1256];
        full[1000 + 1] = 2f64.ln();
        for z in 0..256 {
            if z != 1 {
                full[1000 + z] = 0.0;
            }
        }
        // the large non-digital logits get no mass
        let pmf = sample_distribution(&LogitVector(full), &map).unwrap();
        assert!((pmf.get(1) - 2.0 / 257.0).abs() < 1e-15);
        assert!((pmf.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rejects_short_vocab() {
        let map = DigitalTokenMap::build(|s| vec![1000 + s.parse::<u32>().unwrap()]).unwrap();
        let err = sample_distribution(&LogitVector(vec![0.0; 1100]), &map).unwrap_err();
        assert!(matches!(err, Error::CorruptProviderOutput(_)));
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut y = [0.0; 256];
        y[9] = f64::INFINITY;
        assert!(matches!(
            softmax256(&y),
            Err(Error::CorruptProviderOutput(_))
        ));
        y[9] = f64::NAN;
        assert!(matches!(
            softmax256(&y),
            Err(Error::CorruptProviderOutput(_))
        ));
    }

    #[test]
    fn shift_invariance() {
        let y: [f64; 256] = std::array::from_fn(|z| ((z * 37 % 101) as f64).sin() * 4.0);
        let base = softmax256(&y).unwrap();
        for c in [-7.5, 0.125, 3.0, 100.0] {
            let shifted = softmax256(&y.map(|v| v + c)).unwrap();
            for z in 0..256 {
                assert!((base.probabilities()[z] - shifted.probabilities()[z]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            from_spec("builtin:order1").unwrap().name(),
            "builtin:order1"
        );
        assert_eq!(
            from_spec("builtin:order2:alpha=0.5").unwrap().name(),
            "builtin:order2:alpha=0.5"
        );
        assert!(from_spec("builtin:order3").is_err());
        assert!(from_spec("builtin:order0:beta=1").is_err());
        assert!(from_spec("nope").is_err());
    }
}
