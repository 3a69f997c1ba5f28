//! Binary batch records, one per manifest item, little-endian throughout.
//!
//! Header (72 bytes):
//!
//! | offset | field |
//! |---|---|
//! | 0 | magic `"MDNO"` |
//! | 4 | format version (u32) |
//! | 8 | item index (u64) |
//! | 16 | teacher view count (u32) |
//! | 20 | student global view count (u32) |
//! | 24 | student local view count (u32) |
//! | 28 | global view side (u32) |
//! | 32 | local view side (u32) |
//! | 36 | view dtype code (u8, 1 = f32) |
//! | 37 | mask dtype code (u8, 1 = bit-packed rows) |
//! | 38 | has pair (u8) |
//! | 39 | reserved (u8) |
//! | 40 | token mask count (u32) |
//! | 44 | token rows (u32) |
//! | 48 | token cols (u32) |
//! | 52 | item id byte length (u32) |
//! | 56 | volume id byte length (u32) |
//! | 60 | reserved (u32) |
//! | 64 | payload byte length (u64) |
//!
//! Payload, in order: item id (UTF-8); teacher views; student views
//! (globals, then locals), each row-major f32; token masks, each row packed
//! LSB-first into `ceil(cols / 8)` bytes; if a pair is present, the volume
//! id, `k`, `k'`, `d` (u32), direction (i8) and the two pair views;
//! finally 33 bytes of provenance per view (teacher, student, pair order):
//! window x, y, w, h and anchor y, x (u32), coverage (f64), relaxed (u8).

use std::io::{Read, Write};

use crate::crop_sampler::{CropWindow, PairViews, View};
use crate::dbt_pairs::SlicePair;
use crate::error::{Error, Result};
use crate::mim_masker::TokenMask;
use crate::tissue_mask::Window;

pub const BATCH_MAGIC: &[u8; 4] = b"MDNO";
pub const BATCH_VERSION: u32 = 1;
pub const BATCH_HEADER_LEN: usize = 72;
pub const VIEW_DTYPE_F32: u8 = 1;
pub const MASK_DTYPE_BITPACKED: u8 = 1;
const PROVENANCE_LEN: u64 = 33;

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub volume_id: String,
    pub pair: SlicePair,
    pub views: PairViews,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub item_index: u64,
    pub item_id: String,
    pub teacher_views: Vec<View>,
    /// Global views first, then local views.
    pub student_views: Vec<View>,
    pub token_masks: Vec<TokenMask>,
    pub pair: Option<PairRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchHeader {
    pub item_index: u64,
    pub n_teacher: u32,
    pub n_student_global: u32,
    pub n_student_local: u32,
    pub global_size: u32,
    pub local_size: u32,
    pub view_dtype: u8,
    pub mask_dtype: u8,
    pub has_pair: bool,
    pub n_masks: u32,
    pub token_rows: u32,
    pub token_cols: u32,
    pub id_len: u32,
    pub volume_id_len: u32,
    pub payload_len: u64,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl BatchHeader {
    fn view_count(&self) -> u64 {
        u64::from(self.n_teacher)
            + u64::from(self.n_student_global)
            + u64::from(self.n_student_local)
            + if self.has_pair { 2 } else { 0 }
    }

    fn mask_row_bytes(&self) -> u64 {
        u64::from(self.token_cols).div_ceil(8)
    }

    /// Payload length implied by the counts and dims.
    pub fn expected_payload_len(&self) -> Option<u64> {
        let g2 = u64::from(self.global_size).checked_pow(2)?;
        let l2 = u64::from(self.local_size).checked_pow(2)?;
        let floats = (u64::from(self.n_teacher) + u64::from(self.n_student_global))
            .checked_mul(g2)?
            .checked_add(u64::from(self.n_student_local).checked_mul(l2)?)?
            .checked_add(if self.has_pair { 2 * g2 } else { 0 })?;
        let masks = u64::from(self.n_masks)
            .checked_mul(u64::from(self.token_rows))?
            .checked_mul(self.mask_row_bytes())?;
        let pair_meta = if self.has_pair {
            u64::from(self.volume_id_len) + 13
        } else {
            0
        };
        u64::from(self.id_len)
            .checked_add(floats.checked_mul(4)?)?
            .checked_add(masks)?
            .checked_add(pair_meta)?
            .checked_add(self.view_count().checked_mul(PROVENANCE_LEN)?)
    }

    pub fn encode(&self) -> [u8; BATCH_HEADER_LEN] {
        let mut b = [0u8; BATCH_HEADER_LEN];
        b[0..4].copy_from_slice(BATCH_MAGIC);
        b[4..8].copy_from_slice(&BATCH_VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.item_index.to_le_bytes());
        let words1 = [
            self.n_teacher,
            self.n_student_global,
            self.n_student_local,
            self.global_size,
            self.local_size,
        ];
        for (i, w) in words1.iter().enumerate() {
            b[16 + 4 * i..20 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        b[36] = self.view_dtype;
        b[37] = self.mask_dtype;
        b[38] = u8::from(self.has_pair);
        let words2 = [
            self.n_masks,
            self.token_rows,
            self.token_cols,
            self.id_len,
            self.volume_id_len,
            0,
        ];
        for (i, w) in words2.iter().enumerate() {
            b[40 + 4 * i..44 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        b[64..72].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; BATCH_HEADER_LEN]) -> Result<Self> {
        if &b[0..4] != BATCH_MAGIC {
            return Err(Error::Format("bad batch magic".into()));
        }
        let word = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        if word(4) != BATCH_VERSION {
            return Err(Error::Format(format!("unsupported batch version {}", word(4))));
        }
        if b[36] != VIEW_DTYPE_F32 || b[37] != MASK_DTYPE_BITPACKED {
            return Err(Error::Format(format!("unsupported dtype codes {}/{}", b[36], b[37])));
        }
        if b[38] > 1 {
            return Err(Error::Format(format!("pair flag {}", b[38])));
        }
        let header = Self {
            item_index: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            n_teacher: word(16),
            n_student_global: word(20),
            n_student_local: word(24),
            global_size: word(28),
            local_size: word(32),
            view_dtype: b[36],
            mask_dtype: b[37],
            has_pair: b[38] == 1,
            n_masks: word(40),
            token_rows: word(44),
            token_cols: word(48),
            id_len: word(52),
            volume_id_len: word(56),
            payload_len: u64::from_le_bytes(b[64..72].try_into().expect("8 bytes")),
        };
        match header.expected_payload_len() {
            Some(n) if n == header.payload_len => Ok(header),
            Some(n) => Err(Error::Format(format!(
                "header declares {} payload bytes, dims imply {n}",
                header.payload_len
            ))),
            None => Err(Error::Format("batch dims overflow".into())),
        }
    }
}

impl BatchRecord {
    pub fn header(&self) -> Result<BatchHeader> {
        let global_size = self
            .teacher_views
            .first()
            .or(self.student_views.first())
            .map_or(0, |v| v.size);
        let n_student_global = self.student_views.iter().take_while(|v| v.size == global_size).count();
        let locals = &self.student_views[n_student_global..];
        let local_size = locals.first().map_or(0, |v| v.size);
        if self.teacher_views.iter().any(|v| v.size != global_size) || locals.iter().any(|v| v.size != local_size) {
            return Err(Error::ShapeMismatch(
                "teacher views must share one size; student views are globals then locals".into(),
            ));
        }
        let all_views = self
            .teacher_views
            .iter()
            .chain(&self.student_views)
            .chain(self.pair.iter().flat_map(|p| [&p.views.view_a, &p.views.view_b]));
        for v in all_views {
            if v.pixels.len() != v.size * v.size {
                return Err(Error::ShapeMismatch(format!(
                    "view of side {} holds {} pixels",
                    v.size,
                    v.pixels.len()
                )));
            }
        }
        if let Some(p) = &self.pair {
            if p.views.view_a.size != global_size || p.views.view_b.size != global_size {
                return Err(Error::ShapeMismatch("pair views must have the global size".into()));
            }
        }
        let (rows, cols) = self.token_masks.first().map_or((0, 0), |m| (m.rows(), m.cols()));
        if self.token_masks.iter().any(|m| (m.rows(), m.cols()) != (rows, cols)) {
            return Err(Error::ShapeMismatch("token masks differ in grid size".into()));
        }
        let mut header = BatchHeader {
            item_index: self.item_index,
            n_teacher: u32_of(self.teacher_views.len(), "teacher count")?,
            n_student_global: u32_of(n_student_global, "student count")?,
            n_student_local: u32_of(locals.len(), "student count")?,
            global_size: u32_of(global_size, "view size")?,
            local_size: u32_of(local_size, "view size")?,
            view_dtype: VIEW_DTYPE_F32,
            mask_dtype: MASK_DTYPE_BITPACKED,
            has_pair: self.pair.is_some(),
            n_masks: u32_of(self.token_masks.len(), "mask count")?,
            token_rows: u32_of(rows, "token rows")?,
            token_cols: u32_of(cols, "token cols")?,
            id_len: u32_of(self.item_id.len(), "id length")?,
            volume_id_len: u32_of(self.pair.as_ref().map_or(0, |p| p.volume_id.len()), "volume id length")?,
            payload_len: 0,
        };
        header.payload_len = header
            .expected_payload_len()
            .ok_or_else(|| Error::Format("batch dims overflow".into()))?;
        Ok(header)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        let mut out = Vec::with_capacity(BATCH_HEADER_LEN + header.payload_len as usize);
        out.extend_from_slice(&header.encode());
        out.extend_from_slice(self.item_id.as_bytes());
        for v in self.teacher_views.iter().chain(&self.student_views) {
            put_pixels(&mut out, &v.pixels);
        }
        let row_bytes = header.mask_row_bytes() as usize;
        for m in &self.token_masks {
            for r in 0..m.rows() {
                let mut row = vec![0u8; row_bytes];
                for c in 0..m.cols() {
                    if m.is_masked(r, c) {
                        row[c / 8] |= 1 << (c % 8);
                    }
                }
                out.extend_from_slice(&row);
            }
        }
        if let Some(p) = &self.pair {
            out.extend_from_slice(p.volume_id.as_bytes());
            for v in [p.pair.k, p.pair.k_prime, p.pair.d] {
                out.extend_from_slice(&u32_of(v, "slice index")?.to_le_bytes());
            }
            out.extend_from_slice(&p.pair.direction.to_le_bytes());
            put_pixels(&mut out, &p.views.view_a.pixels);
            put_pixels(&mut out, &p.views.view_b.pixels);
        }
        let pair_views = self.pair.iter().flat_map(|p| [&p.views.view_a, &p.views.view_b]);
        for v in self.teacher_views.iter().chain(&self.student_views).chain(pair_views) {
            let c = &v.crop;
            for f in [c.window.x, c.window.y, c.window.w, c.window.h, c.anchor.0, c.anchor.1] {
                out.extend_from_slice(&u32_of(f, "window coordinate")?.to_le_bytes());
            }
            out.extend_from_slice(&c.coverage.to_le_bytes());
            out.push(u8::from(c.relaxed));
        }
        debug_assert_eq!(out.len(), BATCH_HEADER_LEN + header.payload_len as usize);
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<usize> {
        let bytes = self.encode()?;
        w.write_all(&bytes)?;
        Ok(bytes.len())
    }

    /// Reads one record; `Ok(None)` at a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut hb = [0u8; BATCH_HEADER_LEN];
        let mut filled = 0;
        while filled < BATCH_HEADER_LEN {
            let n = r.read(&mut hb[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::Format("truncated batch header".into()));
            }
            filled += n;
        }
        let header = BatchHeader::decode(&hb)?;
        let len = usize::try_from(header.payload_len).map_err(|_| Error::Format("payload too large".into()))?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Format(format!("truncated batch payload: {e}")))?;
        decode_payload(&header, &payload).map(Some)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let rec = Self::read_from(&mut cursor)?.ok_or_else(|| Error::Format("empty input".into()))?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(rec)
    }
}

/// Decodes a concatenated record stream.
pub fn read_stream<R: Read>(r: &mut R) -> Result<Vec<BatchRecord>> {
    let mut out = Vec::new();
    while let Some(rec) = BatchRecord::read_from(r)? {
        out.push(rec);
    }
    Ok(out)
}

fn put_pixels(out: &mut Vec<u8>, px: &[f32]) {
    for v in px {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        // lengths were checked against the header before decoding
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        head
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n).to_vec()).map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))
    }

    fn pixels(&mut self, side: usize) -> Vec<f32> {
        self.take(side * side * 4)
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect()
    }
}

fn decode_payload(h: &BatchHeader, payload: &[u8]) -> Result<BatchRecord> {
    let mut c = Cursor { buf: payload };
    let item_id = c.string(h.id_len as usize)?;
    let (g, l) = (h.global_size as usize, h.local_size as usize);
    let blank = CropWindow {
        window: Window::new(0, 0, 0, 0),
        anchor: (0, 0),
        coverage: 0.0,
        relaxed: false,
    };
    let view = |c: &mut Cursor, side: usize| View {
        size: side,
        pixels: c.pixels(side),
        crop: blank,
    };
    let mut teacher_views: Vec<View> = (0..h.n_teacher).map(|_| view(&mut c, g)).collect();
    let mut student_views = Vec::with_capacity((h.n_student_global + h.n_student_local) as usize);
    for side in
        std::iter::repeat_n(g, h.n_student_global as usize).chain(std::iter::repeat_n(l, h.n_student_local as usize))
    {
        student_views.push(view(&mut c, side));
    }
    let (rows, cols) = (h.token_rows as usize, h.token_cols as usize);
    let row_bytes = h.mask_row_bytes() as usize;
    let mut token_masks = Vec::with_capacity(h.n_masks as usize);
    for _ in 0..h.n_masks {
        let mut z = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = c.take(row_bytes);
            z.extend((0..cols).map(|col| row[col / 8] >> (col % 8) & 1 == 1));
        }
        token_masks.push(TokenMask::from_bits(rows, cols, z)?);
    }
    let mut pair = if h.has_pair {
        let volume_id = c.string(h.volume_id_len as usize)?;
        let (k, k_prime, d) = (c.u32() as usize, c.u32() as usize, c.u32() as usize);
        let direction = i8::from_le_bytes([c.take(1)[0]]);
        let view_a = view(&mut c, g);
        let view_b = view(&mut c, g);
        Some(PairRecord {
            volume_id,
            pair: SlicePair {
                k,
                k_prime,
                d,
                direction,
            },
            views: PairViews { view_a, view_b },
        })
    } else {
        None
    };
    let pair_views = pair.iter_mut().flat_map(|p| [&mut p.views.view_a, &mut p.views.view_b]);
    for v in teacher_views
        .iter_mut()
        .chain(student_views.iter_mut())
        .chain(pair_views)
    {
        let f: Vec<usize> = (0..6).map(|_| c.u32() as usize).collect();
        let coverage = f64::from_le_bytes(c.take(8).try_into().expect("8 bytes"));
        let relaxed = match c.take(1)[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("relaxed flag {b}"))),
        };
        v.crop = CropWindow {
            window: Window::new(f[0], f[1], f[2], f[3]),
            anchor: (f[4], f[5]),
            coverage,
            relaxed,
        };
    }
    Ok(BatchRecord {
        item_index: h.item_index,
        item_id,
        teacher_views,
        student_views,
        token_masks,
        pair,
    })
}
