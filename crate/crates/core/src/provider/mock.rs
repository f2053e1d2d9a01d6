//! Offline providers used for harness self-tests and baselines.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{CompletionProvider, CompletionRecord, CompletionRequest, ProviderError};
use crate::corpus::TurnPair;
use crate::dsl::{serialize_actions, Action};
use crate::retrieval::{top_k, EmbeddingProvider, ExampleIndex};

fn mock_record(name: &str, request: &CompletionRequest, response_text: String) -> CompletionRecord {
    let mut provider_meta = BTreeMap::new();
    provider_meta.insert("provider".into(), name.to_string());
    CompletionRecord {
        request_hash: request.request_hash(),
        response_text,
        latency_ms: 0,
        provider_meta,
        timestamp_ms: 0,
    }
}

/// Answers every turn with its gold actions. Any correct harness scores 1.0
/// against it.
#[derive(Debug, Clone, Default)]
pub struct EchoOracle {
    gold: HashMap<(String, usize), Vec<Action>>,
}

impl EchoOracle {
    pub const NAME: &'static str = "echo-oracle";

    pub fn new<'a>(pairs: impl IntoIterator<Item = &'a TurnPair>) -> Self {
        EchoOracle {
            gold: pairs
                .into_iter()
                .map(|p| ((p.game_id.clone(), p.turn_index), p.gold_actions.clone()))
                .collect(),
        }
    }
}

impl CompletionProvider for EchoOracle {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionRecord, ProviderError> {
        request.validate()?;
        let turn = request
            .turn
            .as_ref()
            .ok_or_else(|| ProviderError::Config("echo oracle needs the turn reference".into()))?;
        let gold = self
            .gold
            .get(&(turn.game_id.clone(), turn.turn_index))
            .ok_or_else(|| ProviderError::Config(format!("no gold for {}#{}", turn.game_id, turn.turn_index)))?;
        Ok(mock_record(Self::NAME, request, serialize_actions(gold)))
    }

    fn prompt_determined(&self) -> bool {
        false
    }
}

/// Answers with the gold code of the most similar training turn.
pub struct NearestNeighbor {
    index: Arc<ExampleIndex>,
    embedder: Arc<dyn EmbeddingProvider>,
}

impl NearestNeighbor {
    pub const NAME: &'static str = "nearest-neighbor";

    pub fn new(index: Arc<ExampleIndex>, embedder: Arc<dyn EmbeddingProvider>) -> Self {
        NearestNeighbor { index, embedder }
    }
}

impl CompletionProvider for NearestNeighbor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionRecord, ProviderError> {
        request.validate()?;
        let hits = top_k(&self.index, self.embedder.as_ref(), &request.prompt.test_instruction, 1)
            .map_err(|e| ProviderError::Config(format!("retrieval failed: {e}")))?;
        let text = hits.first().map(|h| serialize_actions(&h.example.gold_actions)).unwrap_or_default();
        Ok(mock_record(Self::NAME, request, text))
    }
}
