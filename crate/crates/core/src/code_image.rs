//! Versioned application images, keyed attestation, operator certificates and
//! hash-chained stream signatures.
//!
//! An image is split into `t`-byte chunks. For transfer, each chunk `i` carries
//! the digest of chunk `i + 1` (its *link*), and only the first chunk is covered
//! by an operator certificate. A receiver holding a verified digest for the next
//! chunk can therefore reject a bogus chunk as soon as it arrives.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use rand::{Rng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Output length of every digest, in bytes (128 bits).
pub const DIGEST_LEN: usize = 16;
/// Length of every symmetric secret, in bytes (128 bits).
pub const KEY_LEN: usize = 16;

pub const DEFAULT_CHUNK_SIZE: usize = 256;
pub const DEFAULT_CODE_SIZE: usize = 16384;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image has no chunks")]
    Empty,
    #[error("chunk size must be positive")]
    ZeroChunkSize,
    #[error("code size {code_size} is not a multiple of chunk size {chunk_size}")]
    Misaligned { code_size: usize, chunk_size: usize },
    #[error("chunk index {index} out of range for {count} chunks")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A truncated 128-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        let arr: [u8; DIGEST_LEN] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }

    /// First eight bytes as a little-endian integer.
    pub fn low_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..8])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// A 128-bit symmetric secret.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SecretKey(bytes)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; KEY_LEN];
        rng.fill_bytes(&mut b);
        SecretKey(b)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// HMAC-SHA256 state with the key schedule already absorbed, so that many
/// messages under one key only pay for their own blocks.
#[derive(Clone)]
pub struct KeyedHasher(HmacSha256);

impl KeyedHasher {
    pub fn new(key: &SecretKey) -> Self {
        KeyedHasher(HmacSha256::new_from_slice(key.as_bytes()).expect("hmac accepts any key length"))
    }

    pub fn digest_parts<'a, I>(&self, parts: I) -> Digest
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut mac = self.0.clone();
        for p in parts {
            mac.update(p);
        }
        truncate(&mac.finalize().into_bytes())
    }
}

fn truncate(full: &[u8]) -> Digest {
    let mut out = [0u8; DIGEST_LEN];
    out.copy_from_slice(&full[..DIGEST_LEN]);
    Digest(out)
}

/// Keyed deterministic digest (HMAC-SHA256 truncated to 128 bits).
pub fn attest(key: &SecretKey, data: &[u8]) -> Digest {
    KeyedHasher::new(key).digest_parts([data])
}

/// Unkeyed digest (SHA-256 truncated to 128 bits).
pub fn hash(data: &[u8]) -> Digest {
    truncate(&Sha256::digest(data))
}

pub type AppId = u32;
pub type Version = u32;

/// Chunk contents. Shared so that cloning an image is cheap.
pub type Chunk = Arc<[u8]>;

/// A versioned application binary split into equal-size chunks.
#[derive(Clone, PartialEq, Eq)]
pub struct ApplicationImage {
    app_id: AppId,
    version: Version,
    chunk_size: usize,
    chunks: Vec<Chunk>,
}

impl fmt::Debug for ApplicationImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApplicationImage")
            .field("app_id", &self.app_id)
            .field("version", &self.version)
            .field("chunk_size", &self.chunk_size)
            .field("chunk_count", &self.chunks.len())
            .finish()
    }
}

impl ApplicationImage {
    /// Splits `code` at `chunk_size` boundaries.
    pub fn from_bytes(
        app_id: AppId,
        version: Version,
        code: &[u8],
        chunk_size: usize,
    ) -> Result<Self, ImageError> {
        if chunk_size == 0 {
            return Err(ImageError::ZeroChunkSize);
        }
        if code.is_empty() {
            return Err(ImageError::Empty);
        }
        if code.len() % chunk_size != 0 {
            return Err(ImageError::Misaligned { code_size: code.len(), chunk_size });
        }
        let chunks = code.chunks(chunk_size).map(Chunk::from).collect();
        Ok(ApplicationImage { app_id, version, chunk_size, chunks })
    }

    pub fn from_chunks(
        app_id: AppId,
        version: Version,
        chunks: Vec<Chunk>,
    ) -> Result<Self, ImageError> {
        let chunk_size = chunks.first().ok_or(ImageError::Empty)?.len();
        if chunk_size == 0 {
            return Err(ImageError::ZeroChunkSize);
        }
        if let Some(bad) = chunks.iter().find(|c| c.len() != chunk_size) {
            return Err(ImageError::Misaligned { code_size: bad.len(), chunk_size });
        }
        Ok(ApplicationImage { app_id, version, chunk_size, chunks })
    }

    pub fn random<R: RngCore + ?Sized>(
        app_id: AppId,
        version: Version,
        code_size: usize,
        chunk_size: usize,
        rng: &mut R,
    ) -> Result<Self, ImageError> {
        let mut code = vec![0u8; code_size];
        rng.fill_bytes(&mut code);
        Self::from_bytes(app_id, version, &code, chunk_size)
    }

    pub fn app_id(&self) -> AppId {
        self.app_id
    }

    pub fn version(&self) -> Version {
        self.version
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn code_size(&self) -> usize {
        self.chunk_size * self.chunks.len()
    }

    pub fn chunk(&self, index: usize) -> Option<&Chunk> {
        self.chunks.get(index)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.chunks.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub(crate) fn replace_chunk(&mut self, index: usize, chunk: Chunk) {
        debug_assert_eq!(chunk.len(), self.chunk_size);
        self.chunks[index] = chunk;
    }

    /// Indices whose content differs from `other`. Both images must have the
    /// same chunk count.
    pub fn diff_indices(&self, other: &ApplicationImage) -> BTreeSet<usize> {
        self.chunks
            .iter()
            .zip(&other.chunks)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Attests an entire code region without concatenating it first.
pub fn attest_image(key: &SecretKey, image: &ApplicationImage) -> Digest {
    KeyedHasher::new(key).digest_parts(image.chunks.iter().map(|c| &c[..]))
}

/// Attestation key `ak` together with the reference value over pristine code.
#[derive(Clone, Debug)]
pub struct AttestKey {
    key: SecretKey,
    reference: Digest,
}

impl AttestKey {
    pub fn new(key: SecretKey, pristine: &ApplicationImage) -> Self {
        let reference = attest_image(&key, pristine);
        AttestKey { key, reference }
    }

    pub fn reference_value(&self) -> Digest {
        self.reference
    }

    pub fn check(&self, image: &ApplicationImage) -> bool {
        attest_image(&self.key, image) == self.reference
    }

    /// Re-anchors the reference value after a verified install.
    pub fn rebase(&mut self, image: &ApplicationImage) {
        self.reference = attest_image(&self.key, image);
    }
}

/// Replaces the listed chunks with fresh random content.
pub fn corrupt_chunks<R: RngCore + ?Sized>(
    image: &ApplicationImage,
    indices: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<ApplicationImage, ImageError> {
    let count = image.chunk_count();
    if let Some(&index) = indices.iter().find(|&&i| i >= count) {
        return Err(ImageError::IndexOutOfRange { index, count });
    }
    let mut out = image.clone();
    let mut buf = vec![0u8; image.chunk_size];
    for &i in indices {
        loop {
            rng.fill_bytes(&mut buf);
            if buf[..] != image.chunks[i][..] {
                break;
            }
        }
        out.replace_chunk(i, Chunk::from(&buf[..]));
    }
    Ok(out)
}

/// Picks `kappa` distinct chunk indices uniformly at random.
pub fn random_indices<R: Rng + ?Sized>(chunk_count: usize, kappa: usize, rng: &mut R) -> BTreeSet<usize> {
    rand::seq::index::sample(rng, chunk_count, kappa.min(chunk_count))
        .into_iter()
        .collect()
}

pub type OperatorId = u32;

/// Operator-issued certificate over a payload digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub payload_digest: Digest,
    pub signer: OperatorId,
    pub tag: Digest,
}

impl Certificate {
    pub fn to_hex(&self) -> String {
        format!("{}{}", self.payload_digest.to_hex(), self.tag.to_hex())
    }

    pub fn from_hex(signer: OperatorId, s: &str) -> Option<Self> {
        let s = s.trim();
        if s.len() != 4 * DIGEST_LEN {
            return None;
        }
        Some(Certificate {
            payload_digest: Digest::from_hex(&s[..2 * DIGEST_LEN])?,
            signer,
            tag: Digest::from_hex(&s[2 * DIGEST_LEN..])?,
        })
    }
}

fn cert_tag(key: &SecretKey, signer: OperatorId, payload_digest: &Digest) -> Digest {
    KeyedHasher::new(key).digest_parts([&b"cert"[..], &signer.to_le_bytes(), &payload_digest.0])
}

/// The trusted operator: the only party able to issue certificates.
#[derive(Clone, Debug)]
pub struct Operator {
    id: OperatorId,
    key: SecretKey,
}

impl Operator {
    pub fn new(id: OperatorId, key: SecretKey) -> Self {
        Operator { id, key }
    }

    pub fn random<R: RngCore + ?Sized>(id: OperatorId, rng: &mut R) -> Self {
        Operator::new(id, SecretKey::random(rng))
    }

    pub fn id(&self) -> OperatorId {
        self.id
    }

    pub fn sign(&self, payload: &[u8]) -> Certificate {
        let payload_digest = hash(payload);
        Certificate { payload_digest, signer: self.id, tag: cert_tag(&self.key, self.id, &payload_digest) }
    }

    pub fn verifier(&self) -> OperatorVerifier {
        OperatorVerifier { inner: self.clone() }
    }
}

/// Verification-only handle on the operator's certificates.
#[derive(Clone, Debug)]
pub struct OperatorVerifier {
    inner: Operator,
}

impl OperatorVerifier {
    pub fn operator_id(&self) -> OperatorId {
        self.inner.id
    }

    pub fn verify(&self, cert: &Certificate, payload: &[u8]) -> bool {
        cert.signer == self.inner.id
            && cert.payload_digest == hash(payload)
            && cert.tag == cert_tag(&self.inner.key, cert.signer, &cert.payload_digest)
    }
}

/// One chunk as it travels: position, content and the digest of its successor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamChunk {
    pub index: usize,
    pub bytes: Chunk,
    pub link: Option<Digest>,
}

impl StreamChunk {
    /// Digest covering both content and link, which is what the predecessor
    /// embeds.
    pub fn digest(&self) -> Digest {
        link_digest(&self.bytes, self.link.as_ref())
    }
}

fn link_digest(bytes: &[u8], link: Option<&Digest>) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    if let Some(l) = link {
        h.update(l.0);
    }
    truncate(&h.finalize())
}

/// Signed header of a stream: binds application, version and length to the
/// digest of the first chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHead {
    pub app_id: AppId,
    pub version: Version,
    pub chunk_count: usize,
    pub signature: Certificate,
}

pub fn head_payload(app_id: AppId, version: Version, chunk_count: usize, first: &Digest) -> Vec<u8> {
    let mut p = Vec::with_capacity(40);
    p.extend_from_slice(b"head");
    p.extend_from_slice(&app_id.to_le_bytes());
    p.extend_from_slice(&version.to_le_bytes());
    p.extend_from_slice(&(chunk_count as u64).to_le_bytes());
    p.extend_from_slice(&first.0);
    p
}

pub fn version_payload(app_id: AppId, version: Version) -> Vec<u8> {
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(b"ver");
    p.extend_from_slice(&app_id.to_le_bytes());
    p.extend_from_slice(&version.to_le_bytes());
    p
}

/// An image together with its per-chunk chain links, the signed head and the
/// operator's certificate on `(app, version)`.
#[derive(Clone, Debug)]
pub struct StreamSignedImage {
    image: ApplicationImage,
    chain: Arc<[Digest]>,
    head: StreamHead,
    version_cert: Certificate,
}

impl StreamSignedImage {
    pub fn image(&self) -> &ApplicationImage {
        &self.image
    }

    pub fn head(&self) -> &StreamHead {
        &self.head
    }

    pub fn version_cert(&self) -> &Certificate {
        &self.version_cert
    }

    pub fn version(&self) -> Version {
        self.image.version
    }

    pub fn chunk_count(&self) -> usize {
        self.image.chunk_count()
    }

    /// Successor digest carried by chunk `index`; `None` for the last chunk.
    pub fn link(&self, index: usize) -> Option<Digest> {
        self.chain.get(index).copied()
    }

    pub fn chain(&self) -> &[Digest] {
        &self.chain
    }

    pub fn stream_chunk(&self, index: usize) -> Option<StreamChunk> {
        let bytes = self.image.chunk(index)?.clone();
        Some(StreamChunk { index, bytes, link: self.link(index) })
    }

    pub fn stream(&self) -> Vec<StreamChunk> {
        (0..self.chunk_count()).filter_map(|i| self.stream_chunk(i)).collect()
    }

    pub(crate) fn image_mut(&mut self) -> &mut ApplicationImage {
        &mut self.image
    }

    /// Reassembles an image from a verified stream. The caller is responsible
    /// for having verified every chunk.
    pub fn from_verified_parts(
        head: StreamHead,
        version_cert: Certificate,
        chunks: Vec<StreamChunk>,
    ) -> Result<Self, ImageError> {
        let chain: Vec<Digest> = chunks.iter().filter_map(|c| c.link).collect();
        let bytes = chunks.into_iter().map(|c| c.bytes).collect();
        let image = ApplicationImage::from_chunks(head.app_id, head.version, bytes)?;
        if chain.len() + 1 != image.chunk_count() {
            return Err(ImageError::Manifest("chain length mismatch".into()));
        }
        Ok(StreamSignedImage { image, chain: chain.into(), head, version_cert })
    }
}

/// Computes the chain links back to front and has the operator sign the head.
pub fn build_stream_chain(
    image: ApplicationImage,
    operator: &Operator,
) -> Result<StreamSignedImage, ImageError> {
    let n = image.chunk_count();
    if n == 0 {
        return Err(ImageError::Empty);
    }
    let mut chain = vec![Digest::default(); n - 1];
    let mut next: Option<Digest> = None;
    for i in (0..n).rev() {
        let d = link_digest(&image.chunks[i], next.as_ref());
        if i > 0 {
            chain[i - 1] = d;
        }
        next = Some(d);
    }
    let first = next.expect("non-empty");
    let signature = operator.sign(&head_payload(image.app_id, image.version, n, &first));
    let head = StreamHead { app_id: image.app_id, version: image.version, chunk_count: n, signature };
    let version_cert = operator.sign(&version_payload(image.app_id, image.version));
    Ok(StreamSignedImage { image, chain: chain.into(), head, version_cert })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// First chunk of a head-anchored stream failed the signature check.
    BadSignature,
    /// Chunk digest differs from the digest embedded in its predecessor.
    ChainMismatch,
    /// Chunk index is not the successor of the previous one.
    OutOfOrder,
    /// Stream has no anchor: neither a head nor an expected digest.
    Unanchored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamRejection {
    /// Position in the received slice of the first rejected chunk.
    pub position: usize,
    /// Chunk index carried by the rejected chunk.
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamVerdict {
    /// Number of leading chunks that verified.
    pub accepted: usize,
    /// Digest the next chunk must have, taken from the last accepted chunk.
    pub next_expected: Option<Digest>,
    pub rejection: Option<StreamRejection>,
}

impl StreamVerdict {
    pub fn is_accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Incrementally verifies a prefix of a chunk stream.
///
/// With `expected_next == None` the first chunk must be chunk 0 and is checked
/// against `head`. Otherwise the first chunk is checked against
/// `expected_next`. Every later chunk must directly follow its predecessor and
/// match the predecessor's link.
pub fn verify_stream_prefix(
    received: &[StreamChunk],
    head: Option<&StreamHead>,
    expected_next: Option<Digest>,
    verifier: &OperatorVerifier,
) -> StreamVerdict {
    let mut expected = expected_next;
    let mut prev_index: Option<usize> = None;
    for (pos, chunk) in received.iter().enumerate() {
        let reject = |reason| StreamVerdict {
            accepted: pos,
            next_expected: expected,
            rejection: Some(StreamRejection { position: pos, index: chunk.index, reason }),
        };
        if let Some(p) = prev_index {
            if chunk.index != p + 1 {
                return reject(RejectReason::OutOfOrder);
            }
        }
        let d = chunk.digest();
        match expected {
            Some(e) => {
                if d != e {
                    return reject(RejectReason::ChainMismatch);
                }
            }
            None => {
                let Some(h) = head else {
                    return reject(RejectReason::Unanchored);
                };
                let payload = head_payload(h.app_id, h.version, h.chunk_count, &d);
                if chunk.index != 0 || !verifier.verify(&h.signature, &payload) {
                    return reject(RejectReason::BadSignature);
                }
            }
        }
        if let Some(h) = head {
            // links must stop exactly at the advertised last chunk
            let is_last = chunk.index + 1 == h.chunk_count;
            if is_last != chunk.link.is_none() || chunk.index >= h.chunk_count {
                return reject(RejectReason::ChainMismatch);
            }
        }
        expected = chunk.link;
        prev_index = Some(chunk.index);
    }
    StreamVerdict { accepted: received.len(), next_expected: expected, rejection: None }
}

/// Writes the raw code to `bin_path` and a `key=value` manifest next to it.
pub fn write_image_files(
    signed: &StreamSignedImage,
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<(), ImageError> {
    fs::write(bin_path, signed.image.to_bytes())?;
    let mut m = fs::File::create(manifest_path)?;
    writeln!(m, "app_id={}", signed.image.app_id)?;
    writeln!(m, "version={}", signed.image.version)?;
    writeln!(m, "t={}", signed.image.chunk_size)?;
    writeln!(m, "Z={}", signed.image.code_size())?;
    writeln!(m, "signer={}", signed.head.signature.signer)?;
    writeln!(m, "head_signature={}", signed.head.signature.to_hex())?;
    writeln!(m, "version_cert={}", signed.version_cert.to_hex())?;
    for (i, d) in signed.chain.iter().enumerate() {
        writeln!(m, "chain.{i}={d}")?;
    }
    Ok(())
}

/// Reads an image written by [`write_image_files`]. Signatures are carried
/// through unchecked; verify with [`verify_stream_prefix`].
pub fn read_image_files(bin_path: &Path, manifest_path: &Path) -> Result<StreamSignedImage, ImageError> {
    let code = fs::read(bin_path)?;
    let text = fs::read_to_string(manifest_path)?;
    let mut app_id = None;
    let mut version = None;
    let mut t = None;
    let mut z = None;
    let mut signer = None;
    let mut head_hex = None;
    let mut ver_hex = None;
    let mut chain: Vec<(usize, Digest)> = Vec::new();
    let bad = |what: &str| ImageError::Manifest(what.to_string());
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        let num = |v: &str| v.trim().parse::<u64>().map_err(|_| bad(k));
        match k.trim() {
            "app_id" => app_id = Some(num(v)? as AppId),
            "version" => version = Some(num(v)? as Version),
            "t" => t = Some(num(v)? as usize),
            "Z" => z = Some(num(v)? as usize),
            "signer" => signer = Some(num(v)? as OperatorId),
            "head_signature" => head_hex = Some(v.to_string()),
            "version_cert" => ver_hex = Some(v.to_string()),
            key if key.starts_with("chain.") => {
                let i = key["chain.".len()..].parse::<usize>().map_err(|_| bad(key))?;
                chain.push((i, Digest::from_hex(v).ok_or_else(|| bad(key))?));
            }
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    let (app_id, version, t, z) = (
        app_id.ok_or_else(|| bad("missing app_id"))?,
        version.ok_or_else(|| bad("missing version"))?,
        t.ok_or_else(|| bad("missing t"))?,
        z.ok_or_else(|| bad("missing Z"))?,
    );
    if z != code.len() {
        return Err(bad("Z does not match binary length"));
    }
    let signer = signer.ok_or_else(|| bad("missing signer"))?;
    let signature = Certificate::from_hex(signer, head_hex.as_deref().ok_or_else(|| bad("missing head_signature"))?)
        .ok_or_else(|| bad("head_signature"))?;
    let version_cert = Certificate::from_hex(signer, ver_hex.as_deref().ok_or_else(|| bad("missing version_cert"))?)
        .ok_or_else(|| bad("version_cert"))?;
    let image = ApplicationImage::from_bytes(app_id, version, &code, t)?;
    chain.sort_by_key(|(i, _)| *i);
    if chain.len() + 1 != image.chunk_count() || chain.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
        return Err(bad("chain entries do not cover chunks 0..Z/t-1"));
    }
    let head = StreamHead { app_id, version, chunk_count: image.chunk_count(), signature };
    let chain: Vec<Digest> = chain.into_iter().map(|(_, d)| d).collect();
    Ok(StreamSignedImage { image, chain: chain.into(), head, version_cert })
}
