//! Roles, the table access matrix, and salted password hashes.

use std::fmt;
use std::str::FromStr;

use hmac::Hmac;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;

use super::table::USERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Admin,
    Operator,
    Viewer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Admin => "ADMIN",
            Role::Operator => "OPERATOR",
            Role::Viewer => "VIEWER",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Role::Admin, Role::Operator, Role::Viewer]
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Insert,
    Upsert,
    Delete,
}

/// The user table is admin-only; everything else is readable by all and
/// writable by operators and admins.
pub fn authorize(role: Role, table: &str, access: Access) -> bool {
    if table == USERS {
        return role == Role::Admin;
    }
    match access {
        Access::Read => true,
        Access::Insert | Access::Upsert | Access::Delete => role != Role::Viewer,
    }
}

pub const PASSWORD_ITERATIONS: u32 = 50_000;
const HASH_PREFIX: &str = "pbkdf2-sha256";

/// `pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>`
pub fn hash_password(password: &str) -> String {
    hash_password_with(password, PASSWORD_ITERATIONS)
}

pub fn hash_password_with(password: &str, iterations: u32) -> String {
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    let hash = derive(password, &salt, iterations);
    format!("{HASH_PREFIX}${iterations}${}${}", hex::encode(salt), hex::encode(hash))
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2::<Hmac<Sha256>>(password.as_bytes(), salt, iterations, &mut out)
        .expect("hmac accepts any key length");
    out
}

pub fn verify_password(password: &str, encoded: &str) -> bool {
    let parts: Vec<&str> = encoded.split('$').collect();
    let [prefix, iters, salt, hash] = parts[..] else {
        return false;
    };
    if prefix != HASH_PREFIX {
        return false;
    }
    let (Ok(iterations), Ok(salt), Ok(expected)) = (iters.parse::<u32>(), hex::decode(salt), hex::decode(hash)) else {
        return false;
    };
    if iterations == 0 || expected.len() != 32 {
        return false;
    }
    derive(password, &salt, iterations).ct_eq(&expected[..]).into()
}
