//! Registered users and their bearer tokens, optionally kept in a JSON file
//! that is rewritten atomically on every change.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::state::UserProfile;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredUser {
    #[serde(flatten)]
    profile: UserProfile,
    token: String,
}

#[derive(Debug, Default)]
pub struct UserStore {
    profiles: HashMap<String, UserProfile>,
    tokens: HashMap<String, String>,
    path: Option<PathBuf>,
    next_id: u64,
}

#[derive(Debug, PartialEq, Eq)]
pub enum UserStoreError {
    Duplicate,
    Unknown,
    AlreadyLinked,
    Io(String),
}

impl UserStore {
    pub fn open(path: Option<PathBuf>) -> Result<Self, String> {
        let mut store = UserStore {
            path: path.clone(),
            ..Default::default()
        };
        let Some(path) = path.filter(|p| p.exists()) else {
            return Ok(store);
        };
        let text =
            std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let users: Vec<StoredUser> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for u in users {
            store.tokens.insert(u.token, u.profile.user_id.clone());
            store.profiles.insert(u.profile.user_id.clone(), u.profile);
        }
        store.next_id = store.profiles.len() as u64;
        Ok(store)
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.profiles.get(user_id)
    }

    pub fn by_token(&self, token: &str) -> Option<&UserProfile> {
        self.tokens.get(token).and_then(|id| self.profiles.get(id))
    }

    /// Returns the profile and its new token.
    pub fn register(
        &mut self,
        user_id: Option<&str>,
        display_name: &str,
        now_ms: u64,
    ) -> Result<(UserProfile, String), UserStoreError> {
        let user_id = match user_id {
            Some(id) => id.to_string(),
            None => loop {
                self.next_id += 1;
                let id = format!("u-{:04}", self.next_id);
                if !self.profiles.contains_key(&id) {
                    break id;
                }
            },
        };
        if self.profiles.contains_key(&user_id) {
            return Err(UserStoreError::Duplicate);
        }
        let profile = UserProfile {
            user_id: user_id.clone(),
            display_name: display_name.to_string(),
            account_id: None,
            created_ms: now_ms,
        };
        let token = new_token();
        self.profiles.insert(user_id.clone(), profile.clone());
        self.tokens.insert(token.clone(), user_id);
        self.persist()?;
        Ok((profile, token))
    }

    pub fn link(&mut self, user_id: &str, account_id: &str) -> Result<UserProfile, UserStoreError> {
        let profile = self
            .profiles
            .get_mut(user_id)
            .ok_or(UserStoreError::Unknown)?;
        if profile.account_id.is_some() {
            return Err(UserStoreError::AlreadyLinked);
        }
        profile.account_id = Some(account_id.to_string());
        let profile = profile.clone();
        self.persist()?;
        Ok(profile)
    }

    fn persist(&self) -> Result<(), UserStoreError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut users: Vec<StoredUser> = self
            .tokens
            .iter()
            .map(|(token, id)| StoredUser {
                profile: self.profiles[id].clone(),
                token: token.clone(),
            })
            .collect();
        users.sort_by(|a, b| a.profile.user_id.cmp(&b.profile.user_id));
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| UserStoreError::Io(e.to_string());
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(&users).expect("serializable"),
        )
        .map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }
}

fn new_token() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
