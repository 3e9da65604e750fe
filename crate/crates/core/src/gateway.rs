//! HTTP chat service over a trained model. Sessions are serialized per id;
//! the model and memory bank are shared read-only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::Device;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::artifacts::{load_reasoner, load_tokenizer, PreparedLayout};
use crate::concepts::ConceptReasoner;
use crate::config::SystemConfig;
use crate::corpus::{Speaker, StrategyId, StrategyTaxonomy, Utterance};
use crate::emotion::{build_detector, EmotionDetector, EmotionLabel};
use crate::error::{Error, Result};
use crate::features::{ContextAssembler, ContextPipeline, EncodedSample, FeatureConfig};
use crate::membank::MemoryBank;
use crate::netcore::{DecodeConfig, EncoderInputs, MemorySelection, StrategyMemoryModel};
use crate::tokenizer::TextTokenizer;
use crate::trainer::checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Speaker,
    pub text: String,
    pub emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default)]
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub situation: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub strategy: String,
    pub emotion: String,
    pub concepts: Vec<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub situation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

/// Reply with the metadata the UI shows next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineReply {
    pub reply: String,
    pub strategy: StrategyId,
    pub concepts: Vec<String>,
    pub context_ids: Vec<u32>,
}

pub struct InferenceEngine {
    pub model: StrategyMemoryModel,
    pub bank: MemoryBank,
    pub tokenizer: Box<dyn TextTokenizer>,
    pub detector: Box<dyn EmotionDetector>,
    pub reasoner: Option<ConceptReasoner>,
    pub features: FeatureConfig,
    pub decode: DecodeConfig,
    pub taxonomy: StrategyTaxonomy,
    pub no_mem: bool,
}

impl InferenceEngine {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let ckpt = cfg
            .gateway
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("gateway.checkpoint is not set".into()))?;
        let prepared = cfg
            .gateway
            .prepared_dir
            .clone()
            .or_else(|| cfg.data.prepared_dir.clone())
            .ok_or_else(|| Error::Config("gateway.prepared_dir is not set".into()))?;
        let layout = PreparedLayout::new(prepared);
        let (model, bank, _) = checkpoint::load_for_inference(ckpt, &Device::Cpu)?;
        Ok(InferenceEngine {
            model,
            bank,
            tokenizer: load_tokenizer(cfg, &layout)?,
            detector: build_detector(&cfg.emotion)?,
            reasoner: load_reasoner(cfg, &layout)?,
            features: cfg.feature_config(),
            decode: cfg.decode.clone(),
            taxonomy: StrategyTaxonomy::esconv(),
            no_mem: cfg.trainer.no_mem,
        })
    }

    pub fn pipeline(&self) -> ContextPipeline<'_> {
        ContextPipeline {
            detector: self.detector.as_ref(),
            reasoner: self.reasoner.as_ref(),
            assembler: ContextAssembler {
                tokenizer: self.tokenizer.as_ref(),
                config: &self.features,
            },
        }
    }

    pub fn detect(&self, text: &str) -> Result<EmotionLabel> {
        self.detector.detect(text)
    }

    /// Runs the full pipeline for the next supporter turn after `history`.
    pub fn respond(&self, situation: &str, history: &[Utterance], labels: &[EmotionLabel]) -> Result<EngineReply> {
        let pipeline = self.pipeline();
        let (assembled, _) = pipeline.assemble(situation, history, labels)?;
        let probe = EncodedSample {
            conv_id: 0,
            turn: history.len(),
            context_ids: assembled.context_ids.clone(),
            strategy_ids: assembled.strategy_ids,
            response_ids: Vec::new(),
            strategy: 0,
            concepts: Vec::new(),
            emotions: Vec::new(),
            response_text: String::new(),
        };
        let inputs = EncoderInputs::collate(&[&probe], self.tokenizer.specials(), self.model.dtype(), self.model.device())?;
        let (bank, selection) = if self.no_mem {
            (None, MemorySelection::Disabled)
        } else {
            (Some(&self.bank), MemorySelection::Predicted)
        };
        let prepared = self.model.prepare(&inputs, bank, selection)?;
        let ids = self
            .model
            .generate(&prepared, &self.decode, self.tokenizer.specials())?
            .pop()
            .unwrap_or_default();
        Ok(EngineReply {
            reply: self.tokenizer.decode(&ids),
            strategy: StrategyId(prepared.predicted[0]),
            concepts: assembled.concepts,
            context_ids: assembled.context_ids,
        })
    }
}

/// Session turns as model context, with their stored emotion labels.
pub fn history(session: &Session) -> Result<(Vec<Utterance>, Vec<EmotionLabel>)> {
    let mut utts = Vec::with_capacity(session.turns.len());
    let mut labels = Vec::with_capacity(session.turns.len());
    for t in &session.turns {
        utts.push(Utterance {
            speaker: t.role,
            text: t.text.clone(),
            strategy: None,
        });
        let label = match &t.emotion {
            Some(name) => EmotionLabel::from_name(name)?,
            None => EmotionLabel::neutral(),
        };
        labels.push(label);
    }
    Ok((utts, labels))
}

pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        SessionStore {
            sessions: RwLock::new(HashMap::new()),
            dir: None,
        }
    }

    /// File-backed store; existing `*.json` sessions in `dir` are loaded.
    pub fn persistent(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut map = HashMap::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let s: Session = serde_json::from_slice(&bytes)?;
                map.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(SessionStore {
            sessions: RwLock::new(map),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn create(&self, situation: &str) -> Result<Session> {
        if situation.trim().is_empty() {
            return Err(Error::InvalidArgument("situation must not be empty".into()));
        }
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            situation: situation.trim().to_string(),
            turns: Vec::new(),
        };
        self.persist(&session)?;
        self.sessions
            .write()
            .expect("session map lock")
            .insert(session.id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn persist(&self, session: &Session) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.json", session.id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(session)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Option<Arc<InferenceEngine>>,
    pub store: Arc<SessionStore>,
}

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            Error::UnknownSession(_) => StatusCode::NOT_FOUND,
            Error::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({ "error": self.0.kind(), "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": state.engine.is_some() }))
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> std::result::Result<(StatusCode, Json<Session>), ApiError> {
    Ok((StatusCode::CREATED, Json(state.store.create(&req.situation)?)))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Json<Session>, ApiError> {
    let session = state.store.get(&id)?;
    let s = session.lock().await.clone();
    Ok(Json(s))
}

async fn post_message(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PostMessage>,
) -> std::result::Result<Json<ChatResponse>, ApiError> {
    let started = Instant::now();
    let session = state.store.get(&id)?;
    let engine = state.engine.clone().ok_or(Error::ModelNotLoaded)?;
    if req.text.trim().is_empty() {
        return Err(Error::InvalidArgument("message text must not be empty".into()).into());
    }
    // held across inference so turns within one session stay ordered
    let mut guard = session.lock().await;
    let snapshot = guard.clone();
    let text = req.text.trim().to_string();
    let (reply, user_turn, bot_turn) = tokio::task::spawn_blocking(move || -> Result<_> {
        let user_emotion = engine.detect(&text)?;
        let user_turn = Turn {
            role: Speaker::Seeker,
            text,
            emotion: Some(user_emotion.name().to_string()),
            strategy: None,
            concepts: Vec::new(),
        };
        let mut s = snapshot;
        s.turns.push(user_turn.clone());
        let (utts, labels) = history(&s)?;
        let reply = engine.respond(&s.situation, &utts, &labels)?;
        let strategy = engine
            .taxonomy
            .name(reply.strategy)
            .ok_or_else(|| Error::UnknownStrategy(reply.strategy.0.to_string()))?
            .to_string();
        let bot_turn = Turn {
            role: Speaker::Supporter,
            text: reply.reply.clone(),
            emotion: Some(engine.detect(&reply.reply).unwrap_or_else(|_| EmotionLabel::neutral()).name().to_string()),
            strategy: Some(strategy),
            concepts: reply.concepts.clone(),
        };
        Ok((reply, user_turn, bot_turn))
    })
    .await
    .map_err(|e| Error::InvalidArgument(format!("inference task failed: {e}")))??;

    let response = ChatResponse {
        reply: reply.reply,
        strategy: bot_turn.strategy.clone().unwrap_or_default(),
        emotion: user_turn.emotion.clone().unwrap_or_default(),
        concepts: reply.concepts,
        latency_ms: started.elapsed().as_millis() as u64,
    };
    guard.turns.push(user_turn);
    guard.turns.push(bot_turn);
    state.store.persist(&guard)?;
    Ok(Json(response))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .with_state(state)
}

pub async fn serve(cfg: &SystemConfig) -> Result<()> {
    let engine = InferenceEngine::from_config(cfg)?;
    let store = match &cfg.gateway.session_dir {
        Some(dir) => SessionStore::persistent(dir)?,
        None => SessionStore::in_memory(),
    };
    let state = AppState {
        engine: Some(Arc::new(engine)),
        store: Arc::new(store),
    };
    let addr = format!("{}:{}", cfg.gateway.host, cfg.gateway.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::io(PathBuf::from(&addr), e))?;
    tracing::info!(%addr, "gateway listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(PathBuf::from(addr), e))
}
