//! The prompt store and its `SPPS` file format.
//!
//! Layout: magic `SPPS`, u16 version, u32 record count, then per record a u32
//! payload length, the payload and a CRC-64 of the payload. The routing table
//! follows with its own CRC-64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::SoftPrompt;
use crate::error::{Result, SparcError};
use crate::io::{crc64, Decoder, Encoder};
use crate::linalg::SubspaceBasis;
use crate::model::{AdapterSet, LoraAdapter};

pub const STORE_MAGIC: &[u8; 4] = b"SPPS";
pub const STORE_VERSION: u16 = 1;

const FLAG_FROZEN: u8 = 1;
const FLAG_ADD_MEAN: u8 = 1 << 1;
const FLAG_ADAPTERS: u8 = 1 << 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub task_id: String,
    pub basis: SubspaceBasis,
    pub prompt: SoftPrompt,
    pub adapters: Option<AdapterSet>,
}

/// Records in task-arrival order plus a dataset → prompt routing table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptStore {
    records: Vec<PromptRecord>,
    routing: BTreeMap<String, String>,
}

impl PromptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn routing(&self) -> &BTreeMap<String, String> {
        &self.routing
    }

    pub fn insert(&mut self, record: PromptRecord) -> Result<()> {
        if self.get(&record.prompt.id).is_some() {
            return Err(SparcError::Validation(format!(
                "duplicate prompt id {}",
                record.prompt.id
            )));
        }
        if record.prompt.basis_ref != record.basis.id {
            return Err(SparcError::BasisMismatch {
                prompt: record.prompt.id.clone(),
                expected: record.prompt.basis_ref.clone(),
                actual: record.basis.id.clone(),
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.prompt.id == prompt_id)
    }

    /// Mutable access to an unfrozen record.
    pub fn get_mut(&mut self, prompt_id: &str) -> Result<&mut PromptRecord> {
        let rec = self
            .records
            .iter_mut()
            .find(|r| r.prompt.id == prompt_id)
            .ok_or_else(|| SparcError::Validation(format!("no prompt {prompt_id}")))?;
        if rec.prompt.frozen {
            return Err(SparcError::FrozenPrompt(prompt_id.to_string()));
        }
        Ok(rec)
    }

    pub fn freeze(&mut self, prompt_id: &str) -> Result<()> {
        self.get_mut(prompt_id)?.prompt.frozen = true;
        Ok(())
    }

    pub fn route(&mut self, dataset: &str, prompt_id: &str) -> Result<()> {
        if self.get(prompt_id).is_none() {
            return Err(SparcError::Validation(format!(
                "routing target {prompt_id} does not exist"
            )));
        }
        self.routing
            .insert(dataset.to_string(), prompt_id.to_string());
        Ok(())
    }

    pub fn routed(&self, dataset: &str) -> Option<&PromptRecord> {
        self.routing.get(dataset).and_then(|id| self.get(id))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(STORE_MAGIC);
        enc.u16(STORE_VERSION);
        enc.u32(self.records.len() as u32);
        for rec in &self.records {
            let payload = encode_record(rec);
            enc.u32(payload.len() as u32);
            enc.bytes(&payload);
            enc.u64(crc64(&payload));
        }
        let mut routing = Encoder::new();
        routing.u32(self.routing.len() as u32);
        for (d, p) in &self.routing {
            routing.str(d);
            routing.str(p);
        }
        let routing = routing.into_inner();
        enc.bytes(&routing);
        enc.u64(crc64(&routing));
        enc.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PromptStore> {
        let mut dec = Decoder::new(bytes);
        if dec.take(4, "store magic")? != STORE_MAGIC {
            return Err(SparcError::Format("not an SPPS prompt store".into()));
        }
        let version = dec.u16("store version")?;
        if version != STORE_VERSION {
            return Err(SparcError::Version {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let count = dec.u32("record count")? as usize;
        let mut store = PromptStore::new();
        for i in 0..count {
            let what = format!("record {i}");
            let len = dec.u32(&what)? as usize;
            let payload = dec.take(len, &what)?;
            let stored = dec.u64(&what)?;
            let computed = crc64(payload);
            if stored != computed {
                return Err(SparcError::Digest {
                    what,
                    stored,
                    computed,
                });
            }
            store.insert(decode_record(payload, &what)?)?;
        }
        let start = dec.position();
        let n = dec.u32("routing table")? as usize;
        let mut routes = Vec::with_capacity(n);
        for _ in 0..n {
            routes.push((dec.str("routing table")?, dec.str("routing table")?));
        }
        let computed = crc64(dec.slice(start, dec.position()));
        let stored = dec.u64("routing checksum")?;
        if stored != computed {
            return Err(SparcError::Digest {
                what: "routing table".into(),
                stored,
                computed,
            });
        }
        if dec.remaining() != 0 {
            return Err(SparcError::Format(
                "trailing bytes after prompt store".into(),
            ));
        }
        for (d, p) in routes {
            store.route(&d, &p)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PromptStore> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn encode_record(rec: &PromptRecord) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str(&rec.task_id);
    enc.str(&rec.prompt.id);
    enc.str(&rec.basis.id);
    enc.vector(&rec.basis.mean);
    enc.matrix(&rec.basis.components);
    enc.vector(&rec.basis.eigenvalues);
    enc.f64(rec.basis.total_variance);
    enc.matrix(&rec.prompt.p);
    enc.u32(rec.prompt.trained_on.len() as u32);
    for d in &rec.prompt.trained_on {
        enc.str(d);
    }
    let mut flags = 0;
    if rec.prompt.frozen {
        flags |= FLAG_FROZEN;
    }
    if rec.prompt.add_mean {
        flags |= FLAG_ADD_MEAN;
    }
    if rec.adapters.is_some() {
        flags |= FLAG_ADAPTERS;
    }
    enc.u8(flags);
    if let Some(set) = &rec.adapters {
        enc.u32(set.adapters.len() as u32);
        for ad in &set.adapters {
            enc.str(&ad.target);
            enc.f64(ad.alpha);
            enc.matrix(&ad.a);
            enc.matrix(&ad.b);
        }
    }
    enc.into_inner()
}

fn decode_record(payload: &[u8], what: &str) -> Result<PromptRecord> {
    let mut dec = Decoder::new(payload);
    let task_id = dec.str(what)?;
    let prompt_id = dec.str(what)?;
    let basis_id = dec.str(what)?;
    let mean = dec.vector(what)?;
    let components = dec.matrix(what)?;
    let eigenvalues = dec.vector(what)?;
    let total_variance = dec.f64(what)?;
    let basis = SubspaceBasis::new(mean, components, eigenvalues, total_variance)
        .map_err(|e| SparcError::Format(format!("{what}: {e}")))?;
    if basis.id != basis_id {
        return Err(SparcError::Format(format!(
            "{what}: basis id {basis_id} does not match its content ({})",
            basis.id
        )));
    }
    let p = dec.matrix(what)?;
    let n = dec.u32(what)? as usize;
    let trained_on = (0..n).map(|_| dec.str(what)).collect::<Result<Vec<_>>>()?;
    let flags = dec.u8(what)?;
    let adapters = if flags & FLAG_ADAPTERS != 0 {
        let n = dec.u32(what)? as usize;
        let mut adapters = Vec::with_capacity(n);
        for _ in 0..n {
            adapters.push(LoraAdapter {
                target: dec.str(what)?,
                alpha: dec.f64(what)?,
                a: dec.matrix(what)?,
                b: dec.matrix(what)?,
            });
        }
        Some(AdapterSet { adapters })
    } else {
        None
    };
    if dec.remaining() != 0 {
        return Err(SparcError::Format(format!("{what}: trailing bytes")));
    }
    Ok(PromptRecord {
        task_id,
        prompt: SoftPrompt {
            id: prompt_id,
            p,
            basis_ref: basis_id,
            trained_on,
            frozen: flags & FLAG_FROZEN != 0,
            add_mean: flags & FLAG_ADD_MEAN != 0,
        },
        basis,
        adapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pca, Matrix};
    use crate::prompt::init_prompt;

    fn record(seed: u64) -> PromptRecord {
        let x = Matrix::from_fn(12, 6, |i, j| {
            ((i * 13 + j * 5 + seed as usize) as f64).cos()
        });
        let basis = pca(&x, 3).unwrap();
        let prompt = init_prompt(&basis, 4, seed)
            .unwrap()
            .with_id(format!("p{seed}"));
        PromptRecord {
            task_id: format!("task{seed}"),
            basis,
            prompt,
            adapters: None,
        }
    }

    fn store() -> PromptStore {
        let mut s = PromptStore::new();
        s.insert(record(1)).unwrap();
        let mut r = record(2);
        r.prompt.frozen = true;
        r.prompt.trained_on = vec!["d1".into(), "d2".into()];
        r.adapters = Some(AdapterSet {
            adapters: vec![LoraAdapter {
                target: "layers.0.attn.wq".into(),
                a: Matrix::from_fn(6, 2, |i, j| (i + j) as f64 * 0.01),
                b: Matrix::zeros(2, 6),
                alpha: 8.0,
            }],
        });
        s.insert(r).unwrap();
        s.route("d1", "p1").unwrap();
        s.route("d2", "p2").unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        assert_eq!(PromptStore::from_bytes(&s.to_bytes()).unwrap(), s);
        let empty = PromptStore::new();
        assert_eq!(PromptStore::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn corrupted_payload_byte_is_a_digest_error() {
        let mut bytes = store().to_bytes();
        // Last byte of the first record's payload, just before its checksum.
        let len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        bytes[14 + len - 10] ^= 0x40;
        assert!(matches!(
            PromptStore::from_bytes(&bytes),
            Err(SparcError::Digest { .. })
        ));
    }

    #[test]
    fn version_and_truncation_are_distinct() {
        let bytes = store().to_bytes();
        assert!(matches!(
            PromptStore::from_bytes(&bytes[..bytes.len() - 4]),
            Err(SparcError::Truncated(_))
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            PromptStore::from_bytes(&v),
            Err(SparcError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn frozen_records_refuse_mutation() {
        let mut s = store();
        assert!(matches!(s.get_mut("p2"), Err(SparcError::FrozenPrompt(_))));
        assert!(s.get_mut("p1").is_ok());
        assert!(s.insert(record(1)).is_err());
        assert!(s.route("d3", "nope").is_err());
    }
}
