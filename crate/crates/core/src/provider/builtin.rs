use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::image::OrderingMode;
use crate::provider::{Pmf256, ProbabilityProvider, ProviderSession};
use crate::token::{fingerprint64, word_tokenize, DigitalTokenMap, PromptConfig};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const MAX_ORDER: u8 = 2;

/// Order-k adaptive frequency model with add-alpha smoothing.
///
/// The context of a prediction is the previous `order` symbols of the same
/// sequence; positions before the start of the sequence read as a sentinel
/// that no symbol can equal.
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    order: u8,
    alpha: f64,
    window: usize,
    map: DigitalTokenMap,
}

impl AdaptiveModel {
    pub fn new(order: u8, alpha: f64) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Config(format!(
                "adaptive model order {order} exceeds {MAX_ORDER}"
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!(
                "smoothing must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            order,
            alpha,
            window: usize::MAX,
            map: DigitalTokenMap::identity(),
        })
    }

    /// Caps the context window, for exercising overflow handling.
    pub fn with_context_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Fresh session without prompt bookkeeping.
    pub fn session(&self) -> AdaptiveSession {
        AdaptiveSession {
            order: self.order,
            alpha: self.alpha,
            window: self.window,
            prompt_len: 0,
            history: Vec::new(),
            counts: HashMap::new(),
        }
    }
}

impl ProbabilityProvider for AdaptiveModel {
    fn name(&self) -> String {
        if self.alpha == DEFAULT_ALPHA {
            format!("builtin:order{}", self.order)
        } else {
            format!("builtin:order{}:alpha={}", self.order, self.alpha)
        }
    }

    fn fingerprint(&self) -> u64 {
        let id = format!(
            "builtin-adaptive/1 order={} alpha={:016x}",
            self.order,
            self.alpha.to_bits()
        );
        fingerprint64(id.as_bytes())
    }

    fn token_map(&self) -> &DigitalTokenMap {
        &self.map
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn prompt_tokens(
        &self,
        prompt: &PromptConfig,
        _mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<usize> {
        Ok(word_tokenize(&prompt.effective_text(channel)).len())
    }

    fn begin(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<Box<dyn ProviderSession>> {
        let mut session = self.session();
        session.prompt_len = self.prompt_tokens(prompt, mode, channel)?;
        Ok(Box::new(session))
    }
}

#[derive(Debug, Clone)]
struct Counts {
    freq: [u32; 256],
    total: u32,
}

#[derive(Debug, Clone)]
pub struct AdaptiveSession {
    order: u8,
    alpha: f64,
    window: usize,
    prompt_len: usize,
    history: Vec<u8>,
    counts: HashMap<u32, Box<Counts>>,
}

const SENTINEL: u32 = 256;

impl AdaptiveSession {
    fn context_key(&self) -> u32 {
        let n = self.history.len();
        (1..=self.order as usize).fold(0, |key, back| {
            let s = if back <= n {
                self.history[n - back] as u32
            } else {
                SENTINEL
            };
            key * 257 + s
        })
    }

    /// PMF for the current context, `(count + alpha) / (total + 256 alpha)`.
    pub fn pmf(&self) -> Pmf256 {
        match self.counts.get(&self.context_key()) {
            None => {
                let q = self.alpha / (256.0 * self.alpha);
                Pmf256 { p: [q; 256] }
            }
            Some(c) => {
                let denom = c.total as f64 + 256.0 * self.alpha;
                Pmf256 {
                    p: std::array::from_fn(|z| (c.freq[z] as f64 + self.alpha) / denom),
                }
            }
        }
    }

    pub fn update(&mut self, symbol: u8) {
        let key = self.context_key();
        let entry = self.counts.entry(key).or_insert_with(|| {
            Box::new(Counts {
                freq: [0; 256],
                total: 0,
            })
        });
        entry.freq[symbol as usize] += 1;
        entry.total += 1;
        self.history.push(symbol);
    }

    pub fn history(&self) -> &[u8] {
        &self.history
    }
}

impl ProviderSession for AdaptiveSession {
    fn next_pmf(&mut self) -> Result<Pmf256> {
        let needed = self
            .prompt_len
            .saturating_add(self.history.len())
            .saturating_add(1);
        if needed > self.window {
            return Err(Error::ContextOverflow {
                needed,
                window: self.window,
            });
        }
        Ok(self.pmf())
    }

    fn observe(&mut self, symbol: u8) {
        self.update(symbol);
    }

    fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    fn context_len(&self) -> usize {
        self.history.len()
    }

    fn fork(&self) -> Result<Box<dyn ProviderSession>> {
        Ok(Box::new(self.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(order: u8) -> Box<dyn ProviderSession> {
        AdaptiveModel::new(order, 1.0)
            .unwrap()
            .begin(&PromptConfig::disabled(), OrderingMode::ChannelJoint, None)
            .unwrap()
    }

    #[test]
    fn empty_context_is_uniform() {
        for order in 0..=2 {
            let pmf = session(order).next_pmf().unwrap();
            assert!(pmf.probabilities().iter().all(|&p| p == 1.0 / 256.0));
        }
    }

    #[test]
    fn order0_counts() {
        let mut s = session(0);
        for _ in 0..3 {
            s.observe(7);
        }
        let pmf = s.next_pmf().unwrap();
        assert_eq!(pmf.get(7), 4.0 / 259.0);
        assert_eq!(pmf.get(8), 1.0 / 259.0);
    }

    #[test]
    fn observe_raises_mass() {
        let mut s = session(0);
        let before = s.next_pmf().unwrap().get(42);
        s.observe(42);
        assert!(s.next_pmf().unwrap().get(42) > before);
        assert_eq!(s.context_len(), 1);
    }

    #[test]
    fn order1_pairs() {
        let mut s = session(1);
        for _ in 0..3 {
            s.observe(10);
            s.observe(20);
        }
        s.observe(10);
        // contexts after 10 have seen 20 three times
        assert_eq!(s.next_pmf().unwrap().get(20), 4.0 / 259.0);
    }

    #[test]
    fn order1_learns_alternation() {
        // at alpha = 1 a context needs n > 2294 visits before (n+1)/(n+256) > 0.9
        let mut s = AdaptiveModel::new(1, 0.05).unwrap().session();
        let mut hit = None;
        for step in 0..300 {
            let next = (step % 2) as u8;
            if s.next_pmf().unwrap().get(next) > 0.9 && hit.is_none() {
                hit = Some(step);
            }
            s.observe(next);
        }
        let step = hit.expect("order-1 model never exceeded 0.9 on 0,1,0,1,...");
        assert!(step < 300);
    }

    #[test]
    fn prompt_tokens_counted() {
        let m = AdaptiveModel::new(0, 1.0).unwrap();
        let on = m
            .begin(
                &PromptConfig::custom("a b c"),
                OrderingMode::ChannelJoint,
                None,
            )
            .unwrap();
        assert_eq!(on.prompt_len(), 3);
        let off = m
            .begin(&PromptConfig::disabled(), OrderingMode::ChannelJoint, None)
            .unwrap();
        assert_eq!(off.prompt_len(), 0);
    }

    #[test]
    fn window_is_enforced() {
        let m = AdaptiveModel::new(0, 1.0).unwrap().with_context_window(4);
        let mut s = m
            .begin(
                &PromptConfig::custom("a b"),
                OrderingMode::ChannelJoint,
                None,
            )
            .unwrap();
        s.next_pmf().unwrap();
        s.observe(1);
        s.next_pmf().unwrap();
        s.observe(1);
        assert!(matches!(
            s.next_pmf(),
            Err(Error::ContextOverflow {
                needed: 5,
                window: 4
            })
        ));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdaptiveModel::new(3, 1.0).is_err());
        assert!(AdaptiveModel::new(1, 0.0).is_err());
        assert!(AdaptiveModel::new(1, f64::NAN).is_err());
    }

    #[test]
    fn fingerprints_differ_by_config() {
        let a = AdaptiveModel::new(0, 1.0).unwrap().fingerprint();
        let b = AdaptiveModel::new(1, 1.0).unwrap().fingerprint();
        let c = AdaptiveModel::new(1, 0.5).unwrap().fingerprint();
        assert!(a != b && b != c && a != c);
    }
}
