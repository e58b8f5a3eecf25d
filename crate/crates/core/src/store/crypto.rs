//! Passphrase-encrypted store container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "RTSE"
//! 4       format version (1)
//! 5       kdf id (1 = PBKDF2-HMAC-SHA256)
//! 6..10   kdf iterations
//! 10..26  salt
//! 26      cipher id (1 = ChaCha20-Poly1305)
//! 27..39  nonce
//! 39..55  key check value
//! 55..    ciphertext and tag
//! ```
//!
//! The whole header is bound as associated data.

use std::fs;
use std::io::Write;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RTSE";
pub const FORMAT_VERSION: u8 = 1;
pub const KDF_PBKDF2_SHA256: u8 = 1;
pub const CIPHER_CHACHA20POLY1305: u8 = 1;
pub const HEADER_LEN: usize = 55;
pub const DEFAULT_ITERATIONS: u32 = 200_000;
pub const MAX_ITERATIONS: u32 = 10_000_000;
const KCV_LABEL: &[u8] = b"rfidtrace key check";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("wrong passphrase")]
    WrongPassphrase,
    #[error("container integrity check failed")]
    IntegrityFailure,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("i/o: {0}")]
    Io(String),
}

fn derive_key(passphrase: &str, salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2::<Hmac<Sha256>>(passphrase.as_bytes(), salt, iterations, &mut key)
        .expect("hmac accepts any key length");
    key
}

fn key_check(key: &[u8; 32]) -> [u8; 16] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("any key length");
    mac.update(KCV_LABEL);
    let full = mac.finalize().into_bytes();
    full[..16].try_into().unwrap()
}

/// A derived container key with its salt. Reusing it skips the KDF on
/// every save; each seal still draws a fresh nonce.
#[derive(Clone)]
pub struct SealKey {
    salt: [u8; 16],
    iterations: u32,
    key: [u8; 32],
}

impl std::fmt::Debug for SealKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealKey").field("iterations", &self.iterations).finish_non_exhaustive()
    }
}

impl SealKey {
    pub fn derive(passphrase: &str, iterations: u32) -> Self {
        assert!(iterations > 0 && iterations <= MAX_ITERATIONS);
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        SealKey { salt, iterations, key: derive_key(passphrase, &salt, iterations) }
    }

    pub fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; 12];
        rand::thread_rng().fill_bytes(&mut nonce);

        let mut out = Vec::with_capacity(HEADER_LEN + plaintext.len() + 16);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(KDF_PBKDF2_SHA256);
        out.extend_from_slice(&self.iterations.to_le_bytes());
        out.extend_from_slice(&self.salt);
        out.push(CIPHER_CHACHA20POLY1305);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&key_check(&self.key));
        debug_assert_eq!(out.len(), HEADER_LEN);

        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.key));
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &out })
            .expect("encryption does not fail");
        out.extend_from_slice(&ct);
        out
    }
}

impl SealKey {
    /// Opens a container sealed under this key without re-running the KDF.
    pub fn open(&self, container: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let header = check_header(container)?;
        if header[10..26] != self.salt || header[6..10] != self.iterations.to_le_bytes() {
            return Err(CryptoError::WrongPassphrase);
        }
        decrypt(container, &self.key)
    }
}

fn check_header(container: &[u8]) -> Result<&[u8], CryptoError> {
    if container.len() < HEADER_LEN + 16 || &container[0..4] != MAGIC {
        return Err(CryptoError::IntegrityFailure);
    }
    let version = container[4];
    if version != FORMAT_VERSION {
        return Err(CryptoError::UnsupportedVersion(version));
    }
    if container[5] != KDF_PBKDF2_SHA256 || container[26] != CIPHER_CHACHA20POLY1305 {
        return Err(CryptoError::IntegrityFailure);
    }
    let iterations = u32::from_le_bytes(container[6..10].try_into().unwrap());
    if iterations == 0 || iterations > MAX_ITERATIONS {
        return Err(CryptoError::IntegrityFailure);
    }
    Ok(&container[..HEADER_LEN])
}

fn decrypt(container: &[u8], key: &[u8; 32]) -> Result<Vec<u8>, CryptoError> {
    let (header, body) = container.split_at(HEADER_LEN);
    if !bool::from(key_check(key).ct_eq(&header[39..55])) {
        return Err(CryptoError::WrongPassphrase);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    cipher
        .decrypt(Nonce::from_slice(&header[27..39]), Payload { msg: body, aad: header })
        .map_err(|_| CryptoError::IntegrityFailure)
}

pub fn seal(plaintext: &[u8], passphrase: &str, iterations: u32) -> Vec<u8> {
    SealKey::derive(passphrase, iterations).seal(plaintext)
}

pub fn open(container: &[u8], passphrase: &str) -> Result<Vec<u8>, CryptoError> {
    open_with_key(container, passphrase).map(|(pt, _)| pt)
}

/// Opens a container and returns the key for sealing later versions.
pub fn open_with_key(container: &[u8], passphrase: &str) -> Result<(Vec<u8>, SealKey), CryptoError> {
    let header = check_header(container)?;
    let iterations = u32::from_le_bytes(header[6..10].try_into().unwrap());
    let salt: [u8; 16] = header[10..26].try_into().unwrap();
    let key = derive_key(passphrase, &salt, iterations);
    let plaintext = decrypt(container, &key)?;
    Ok((plaintext, SealKey { salt, iterations, key }))
}

/// Writes `bytes` to `path` via a synced temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}
