use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use tokio::sync::RwLock as AsyncRwLock;
use voxprompt_core::{BackendRegistry, Session};

use crate::config::ServiceConfig;
use crate::error::ApiError;

/// One session behind its own lock. Writers queue in arrival order; readers
/// share the lock and see one revision.
#[derive(Debug)]
pub struct Slot {
    session: Arc<AsyncRwLock<Session>>,
    last_used: Mutex<Instant>,
}

impl Slot {
    fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }

    fn idle_since(&self) -> Instant {
        *self.last_used.lock().unwrap()
    }

    /// Run `f` on a blocking thread with shared access.
    pub async fn read<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&Session) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        self.touch();
        let guard = self.session.clone().read_owned().await;
        let out = tokio::task::spawn_blocking(move || f(&guard))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.touch();
        out
    }

    /// Run `f` with exclusive access, after checking the expected revision.
    pub async fn write<T, F>(&self, expected: Option<u64>, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        self.touch();
        let mut guard = self.session.clone().write_owned().await;
        if let Some(rev) = expected {
            if guard.revision() != rev {
                return Err(ApiError::conflict(rev, guard.revision()));
            }
        }
        let out = tokio::task::spawn_blocking(move || f(&mut guard))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.touch();
        out
    }
}

#[derive(Debug)]
struct Inner {
    config: ServiceConfig,
    registry: Arc<BackendRegistry>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

#[derive(Debug, Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(config: ServiceConfig, registry: Arc<BackendRegistry>) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                registry,
                sessions: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn registry(&self) -> &Arc<BackendRegistry> {
        &self.inner.registry
    }

    pub fn insert(&self, session: Session) -> String {
        let id = session.id().to_string();
        let slot = Arc::new(Slot {
            session: Arc::new(AsyncRwLock::new(session)),
            last_used: Mutex::new(Instant::now()),
        });
        self.inner.sessions.write().unwrap().insert(id.clone(), slot);
        id
    }

    pub fn get(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn remove(&self, id: &str) -> Result<(), ApiError> {
        self.inner
            .sessions
            .write()
            .unwrap()
            .remove(id)
            .map(drop)
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn len(&self) -> usize {
        self.inner.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop sessions idle for longer than the configured timeout as of
    /// `now`. Returns how many were dropped.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let timeout = Duration::from_secs(self.inner.config.idle_timeout_secs);
        let mut map = self.inner.sessions.write().unwrap();
        let before = map.len();
        map.retain(|id, slot| {
            let keep = now.saturating_duration_since(slot.idle_since()) <= timeout;
            if !keep {
                tracing::info!(session = %id, "evicting idle session");
            }
            keep
        });
        before - map.len()
    }
}
