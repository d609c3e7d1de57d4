//! Paired-end read ingestion and k-mer extraction.
//!
//! Reads come in as FASTA or FASTQ (optionally gzip-compressed, sniffed by
//! `.gz` extension), mates matched positionally with optional `/1` `/2` id
//! validation. K-mers are bit-packed two bits per base and, unless the
//! pipeline runs in forward-only mode, canonicalized to the lexicographic
//! minimum of the forward sequence and its reverse complement.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use thiserror::Error;

/// Maximum supported k-mer size (bit-packed into four 64-bit words).
pub const MAX_K: usize = 128;

#[derive(Debug, Error)]
pub enum SeqIoError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record near line {line} of {path}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("pair count mismatch: left has {left} records, right has {right}")]
    PairCountMismatch { left: usize, right: usize },
    #[error("mate ids disagree at record {index}: {left_id:?} vs {right_id:?}")]
    MateIdMismatch {
        index: usize,
        left_id: String,
        right_id: String,
    },
    #[error("k-mer of length {got}, expected {want}")]
    KmerLength { got: usize, want: usize },
    #[error("k-mer contains N")]
    KmerAmbiguous,
    #[error("k = {k} exceeds the supported maximum {max}")]
    KTooLarge { k: usize, max: usize },
}

/// One paired-end read. Sequences are uppercase bytes over `{A,C,G,T,N}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadPair {
    pub id: String,
    pub left: Vec<u8>,
    pub right: Vec<u8>,
}

/// A full sample of read pairs plus the library geometry the assembler needs:
/// the expected insert size (outer span, left start to right end) and the
/// maximum insert-size error delta.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadSet {
    pub pairs: Vec<ReadPair>,
    pub insert_size: usize,
    pub delta: usize,
    /// Records dropped during loading because they were malformed in a
    /// recoverable way (empty sequence, bad alphabet).
    pub dropped: usize,
}

impl ReadSet {
    pub fn min_read_len(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|p| [p.left.len(), p.right.len()])
            .min()
            .unwrap_or(0)
    }
}

/// Strand of a canonicalized k-mer relative to the sequence it was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    Forward,
    Reverse,
}

/// Bit-packed k-mer payload. Bases are packed MSB-first so that comparing the
/// word tuple is the same as comparing the sequence lexicographically.
pub type KmerBits = [u64; 4];

/// A canonical k-mer: packed canonical sequence plus the orientation the
/// original window had relative to the canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Kmer {
    pub bits: KmerBits,
    pub k: u16,
    pub orientation: Orientation,
}

#[inline]
pub fn base_code(b: u8) -> Option<u64> {
    match b {
        b'A' | b'a' => Some(0),
        b'C' | b'c' => Some(1),
        b'G' | b'g' => Some(2),
        b'T' | b't' => Some(3),
        _ => None,
    }
}

#[inline]
pub fn code_base(c: u64) -> u8 {
    match c & 3 {
        0 => b'A',
        1 => b'C',
        2 => b'G',
        _ => b'T',
    }
}

#[inline]
pub fn complement(b: u8) -> u8 {
    match b {
        b'A' | b'a' => b'T',
        b'C' | b'c' => b'G',
        b'G' | b'g' => b'C',
        b'T' | b't' => b'A',
        other => other,
    }
}

pub fn reverse_complement(seq: &[u8]) -> Vec<u8> {
    seq.iter().rev().map(|&b| complement(b)).collect()
}

#[inline]
fn set_base(bits: &mut KmerBits, pos: usize, code: u64) {
    let word = pos / 32;
    let shift = 62 - 2 * (pos % 32);
    bits[word] |= code << shift;
}

#[inline]
pub fn get_base(bits: &KmerBits, pos: usize) -> u64 {
    let word = pos / 32;
    let shift = 62 - 2 * (pos % 32);
    (bits[word] >> shift) & 3
}

/// Packs `seq` (no N allowed) into a forward-strand bit representation.
pub fn pack(seq: &[u8]) -> Result<KmerBits, SeqIoError> {
    if seq.len() > MAX_K {
        return Err(SeqIoError::KTooLarge {
            k: seq.len(),
            max: MAX_K,
        });
    }
    let mut bits = [0u64; 4];
    for (i, &b) in seq.iter().enumerate() {
        let code = base_code(b).ok_or(SeqIoError::KmerAmbiguous)?;
        set_base(&mut bits, i, code);
    }
    Ok(bits)
}

pub fn unpack(bits: &KmerBits, k: usize) -> Vec<u8> {
    (0..k).map(|i| code_base(get_base(bits, i))).collect()
}

/// Reverse complement of a packed k-mer.
pub fn revcomp_bits(bits: &KmerBits, k: usize) -> KmerBits {
    let mut out = [0u64; 4];
    for i in 0..k {
        let code = get_base(bits, i);
        set_base(&mut out, k - 1 - i, 3 - code);
    }
    out
}

/// Canonicalizes a k-mer window: the lexicographic minimum of the window and
/// its reverse complement, with the orientation the window had.
/// `canonicalize(x) == canonicalize(revcomp(x))` up to the orientation flag.
pub fn canonicalize(window: &[u8], k: usize) -> Result<Kmer, SeqIoError> {
    if window.len() != k {
        return Err(SeqIoError::KmerLength {
            got: window.len(),
            want: k,
        });
    }
    let fwd = pack(window)?;
    let rc = revcomp_bits(&fwd, k);
    if fwd <= rc {
        Ok(Kmer {
            bits: fwd,
            k: k as u16,
            orientation: Orientation::Forward,
        })
    } else {
        Ok(Kmer {
            bits: rc,
            k: k as u16,
            orientation: Orientation::Reverse,
        })
    }
}

/// Forward-only encoding used when canonicalization is disabled.
pub fn encode_forward(window: &[u8], k: usize) -> Result<Kmer, SeqIoError> {
    if window.len() != k {
        return Err(SeqIoError::KmerLength {
            got: window.len(),
            want: k,
        });
    }
    Ok(Kmer {
        bits: pack(window)?,
        k: k as u16,
        orientation: Orientation::Forward,
    })
}

/// Iterates the valid k-mer windows of a read, skipping windows that span an
/// N. Yields `(offset, bits)` where bits are canonical (or forward when
/// `canonical` is false). A read of length L with no N yields exactly
/// `L - k + 1` windows.
pub fn kmer_windows<'a>(
    seq: &'a [u8],
    k: usize,
    canonical: bool,
) -> impl Iterator<Item = (usize, KmerBits, Orientation)> + 'a {
    let n = seq.len();
    (0..n.saturating_sub(k.saturating_sub(1)))
        .filter_map(move |i| {
            let window = &seq[i..i + k];
            if window.iter().any(|&b| base_code(b).is_none()) {
                return None;
            }
            let kmer = if canonical {
                canonicalize(window, k).ok()?
            } else {
                encode_forward(window, k).ok()?
            };
            Some((i, kmer.bits, kmer.orientation))
        })
}

enum Record {
    Seq { id: String, seq: Vec<u8> },
    Eof,
}

struct RecordReader<R: BufRead> {
    inner: R,
    path: String,
    line: usize,
    fastq: Option<bool>,
    pending: Option<String>,
}

impl<R: BufRead> RecordReader<R> {
    fn new(inner: R, path: &str) -> Self {
        RecordReader {
            inner,
            path: path.to_string(),
            line: 0,
            fastq: None,
            pending: None,
        }
    }

    fn read_line(&mut self) -> Result<Option<String>, SeqIoError> {
        if let Some(p) = self.pending.take() {
            return Ok(Some(p));
        }
        let mut buf = String::new();
        let n = self
            .inner
            .read_line(&mut buf)
            .map_err(|e| SeqIoError::Io {
                path: self.path.clone(),
                source: e,
            })?;
        if n == 0 {
            return Ok(None);
        }
        self.line += 1;
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok(Some(buf))
    }

    fn malformed(&self, reason: &str) -> SeqIoError {
        SeqIoError::Malformed {
            path: self.path.clone(),
            line: self.line,
            reason: reason.to_string(),
        }
    }

    fn next_record(&mut self) -> Result<Record, SeqIoError> {
        let header = loop {
            match self.read_line()? {
                None => return Ok(Record::Eof),
                Some(l) if l.is_empty() => continue,
                Some(l) => break l,
            }
        };
        let fastq = *self.fastq.get_or_insert_with(|| header.starts_with('@'));
        if fastq {
            if !header.starts_with('@') {
                return Err(self.malformed("expected '@' header"));
            }
            let id = header[1..].split_whitespace().next().unwrap_or("").to_string();
            let seq = self
                .read_line()?
                .ok_or_else(|| self.malformed("truncated record: missing sequence"))?;
            let plus = self
                .read_line()?
                .ok_or_else(|| self.malformed("truncated record: missing '+'"))?;
            if !plus.starts_with('+') {
                return Err(self.malformed("expected '+' separator"));
            }
            let qual = self
                .read_line()?
                .ok_or_else(|| self.malformed("truncated record: missing quality"))?;
            if qual.len() != seq.len() {
                return Err(self.malformed("quality length differs from sequence length"));
            }
            Ok(Record::Seq {
                id,
                seq: seq.into_bytes(),
            })
        } else {
            if !header.starts_with('>') {
                return Err(self.malformed("expected '>' header"));
            }
            let id = header[1..].split_whitespace().next().unwrap_or("").to_string();
            let mut seq = Vec::new();
            loop {
                match self.read_line()? {
                    None => break,
                    Some(l) if l.starts_with('>') => {
                        self.pending = Some(l);
                        break;
                    }
                    Some(l) => seq.extend_from_slice(l.as_bytes()),
                }
            }
            Ok(Record::Seq { id, seq })
        }
    }
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, SeqIoError> {
    let file = File::open(path).map_err(|e| SeqIoError::Open {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader: Box<dyn Read> = if path.extension().and_then(|e| e.to_str()) == Some("gz") {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

fn read_all_records(path: &Path, dropped: &mut usize) -> Result<Vec<(String, Vec<u8>)>, SeqIoError> {
    let mut reader = RecordReader::new(open_reader(path)?, &path.display().to_string());
    let mut out = Vec::new();
    loop {
        match reader.next_record()? {
            Record::Eof => break,
            Record::Seq { id, seq } => {
                let ok = !seq.is_empty()
                    && seq
                        .iter()
                        .all(|&b| matches!(b.to_ascii_uppercase(), b'A' | b'C' | b'G' | b'T' | b'N'));
                if ok {
                    out.push((id, seq.to_ascii_uppercase()));
                } else {
                    *dropped += 1;
                }
            }
        }
    }
    Ok(out)
}

fn strip_mate_suffix(id: &str) -> &str {
    id.strip_suffix("/1")
        .or_else(|| id.strip_suffix("/2"))
        .unwrap_or(id)
}

/// Loads paired FASTA/FASTQ files. Records are matched positionally; when
/// both mates carry `/1` `/2` suffixes the shared stem must agree.
pub fn load_paired_reads(
    left_path: &Path,
    right_path: &Path,
    insert_size: usize,
    delta: usize,
) -> Result<ReadSet, SeqIoError> {
    let mut dropped = 0;
    let left = read_all_records(left_path, &mut dropped)?;
    let right = read_all_records(right_path, &mut dropped)?;
    if left.len() != right.len() {
        return Err(SeqIoError::PairCountMismatch {
            left: left.len(),
            right: right.len(),
        });
    }
    let mut pairs = Vec::with_capacity(left.len());
    for (index, ((lid, lseq), (rid, rseq))) in left.into_iter().zip(right).enumerate() {
        let has_suffix = (lid.ends_with("/1") || lid.ends_with("/2"))
            && (rid.ends_with("/1") || rid.ends_with("/2"));
        if has_suffix && strip_mate_suffix(&lid) != strip_mate_suffix(&rid) {
            return Err(SeqIoError::MateIdMismatch {
                index,
                left_id: lid,
                right_id: rid,
            });
        }
        pairs.push(ReadPair {
            id: strip_mate_suffix(&lid).to_string(),
            left: lseq,
            right: rseq,
        });
    }
    Ok(ReadSet {
        pairs,
        insert_size,
        delta,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn kmer_str(s: &str) -> Kmer {
        canonicalize(s.as_bytes(), s.len()).unwrap()
    }

    #[test]
    fn canonicalize_palindrome_is_forward() {
        let k = kmer_str("ACGT");
        assert_eq!(unpack(&k.bits, 4), b"ACGT");
        assert_eq!(k.orientation, Orientation::Forward);
    }

    #[test]
    fn canonicalize_tttt_flips() {
        let k = kmer_str("TTTT");
        assert_eq!(unpack(&k.bits, 4), b"AAAA");
        assert_eq!(k.orientation, Orientation::Reverse);
    }

    #[test]
    fn canonicalize_rejects_n_and_bad_length() {
        assert!(canonicalize(b"ACNT", 4).is_err());
        assert!(canonicalize(b"ACG", 4).is_err());
    }

    #[test]
    fn windows_skip_n_and_count() {
        let seq = b"ACGTNACGTA";
        let windows: Vec<_> = kmer_windows(seq, 3, true).collect();
        // positions 0,1 valid; 2,3,4 span the N; 5,6,7 valid
        assert_eq!(windows.iter().map(|w| w.0).collect::<Vec<_>>(), vec![0, 1, 5, 6, 7]);
        let clean = b"ACGTACGTA";
        assert_eq!(kmer_windows(clean, 3, true).count(), clean.len() - 3 + 1);
    }

    #[test]
    fn load_single_record_pair() {
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("l.fq");
        let r = dir.path().join("r.fq");
        std::fs::write(&l, "@r1/1\nACGT\n+\nIIII\n").unwrap();
        std::fs::write(&r, "@r1/2\nTTTT\n+\nIIII\n").unwrap();
        let rs = load_paired_reads(&l, &r, 300, 30).unwrap();
        assert_eq!(rs.pairs.len(), 1);
        assert_eq!(rs.pairs[0].left, b"ACGT");
        assert_eq!(rs.dropped, 0);
    }

    #[test]
    fn load_detects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("l.fq");
        let r = dir.path().join("r.fq");
        let mut lf = File::create(&l).unwrap();
        for i in 0..10 {
            writeln!(lf, "@r{i}\nACGT\n+\nIIII").unwrap();
        }
        let mut rf = File::create(&r).unwrap();
        for i in 0..9 {
            writeln!(rf, "@r{i}\nACGT\n+\nIIII").unwrap();
        }
        match load_paired_reads(&l, &r, 300, 30) {
            Err(SeqIoError::PairCountMismatch { left: 10, right: 9 }) => {}
            other => panic!("expected pair count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gzip_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("l.fq.gz");
        let r = dir.path().join("r.fq.gz");
        for p in [&l, &r] {
            let f = File::create(p).unwrap();
            let mut gz = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            gz.write_all(b"@x\nACGTACGT\n+\nIIIIIIII\n").unwrap();
            gz.finish().unwrap();
        }
        let rs = load_paired_reads(&l, &r, 200, 20).unwrap();
        assert_eq!(rs.pairs.len(), 1);
        assert_eq!(rs.pairs[0].left, b"ACGTACGT");
    }

    #[test]
    fn fasta_multiline_records() {
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("l.fa");
        let r = dir.path().join("r.fa");
        std::fs::write(&l, ">a\nACGT\nACGT\n>b\nTTTT\n").unwrap();
        std::fs::write(&r, ">a\nGGGG\n>b\nCCCC\n").unwrap();
        let rs = load_paired_reads(&l, &r, 200, 20).unwrap();
        assert_eq!(rs.pairs.len(), 2);
        assert_eq!(rs.pairs[0].left, b"ACGTACGT");
    }

    proptest! {
        #[test]
        fn canonicalize_agrees_with_revcomp(seq in proptest::collection::vec(0u8..4, 21)) {
            let fwd: Vec<u8> = seq.iter().map(|&c| code_base(c as u64)).collect();
            let rc = reverse_complement(&fwd);
            let a = canonicalize(&fwd, 21).unwrap();
            let b = canonicalize(&rc, 21).unwrap();
            prop_assert_eq!(a.bits, b.bits);
        }

        #[test]
        fn pack_unpack_roundtrip(seq in proptest::collection::vec(0u8..4, 1..=121)) {
            let fwd: Vec<u8> = seq.iter().map(|&c| code_base(c as u64)).collect();
            let bits = pack(&fwd).unwrap();
            prop_assert_eq!(unpack(&bits, fwd.len()), fwd);
        }
    }
}
