//! Canonical byte encoding for every protocol value.
//!
//! The format is deliberately small: integers are fixed-width big-endian,
//! byte strings and lists carry a `u32` length prefix, enums start with a
//! one-byte tag and struct fields follow declaration order. Sets are encoded
//! in ascending order and the decoder rejects anything that is not strictly
//! ascending, so every value has exactly one encoding.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input (wanted {wanted} more bytes)")]
    UnexpectedEof { wanted: usize },
    #[error("unknown {what} tag {tag}")]
    UnknownTag { what: &'static str, tag: u8 },
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

pub trait Encode {
    fn encode_to(&self, out: &mut Vec<u8>);

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_to(&mut out);
        out
    }
}

pub trait Decode: Sized {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    /// Decodes a complete value, rejecting trailing bytes.
    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

/// Encodes `value` with the canonical encoding.
pub fn canonical_encode<T: Encode + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    value.encode_to(&mut out);
    out
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(DecodeError::UnexpectedEof { wanted: n - rest });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn len_prefix(&mut self) -> Result<usize, DecodeError> {
        Ok(u32::decode_from(self)? as usize)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

pub fn encode_len(len: usize, out: &mut Vec<u8>) {
    let len = u32::try_from(len).expect("length exceeds u32");
    out.extend_from_slice(&len.to_be_bytes());
}

macro_rules! impl_int {
    ($($t:ty),*) => {$(
        impl Encode for $t {
            fn encode_to(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_be_bytes());
            }
        }
        impl Decode for $t {
            fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                Ok(<$t>::from_be_bytes(r.array()?))
            }
        }
    )*};
}

impl_int!(u8, u16, u32, u64, i64);

impl Encode for bool {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(u8::from(*self));
    }
}

impl Decode for bool {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::UnknownTag { what: "bool", tag }),
        }
    }
}

impl Encode for [u8] {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_len(self.len(), out);
        out.extend_from_slice(self);
    }
}

impl Encode for str {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.as_bytes().encode_to(out);
    }
}

impl Encode for String {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.as_str().encode_to(out);
    }
}

impl Decode for String {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix()?;
        let bytes = r.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

/// Raw byte strings. `Vec<u8>` goes through the generic list impl, which
/// would be identical on the wire, but this wrapper avoids per-byte work.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Bytes(pub Vec<u8>);

impl Encode for Bytes {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.0.as_slice().encode_to(out);
    }
}

impl Decode for Bytes {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix()?;
        Ok(Bytes(r.take(n)?.to_vec()))
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_len(self.len(), out);
        for item in self {
            item.encode_to(out);
        }
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix()?;
        // Cap the preallocation; a hostile length prefix must not allocate.
        let mut v = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            v.push(T::decode_from(r)?);
        }
        Ok(v)
    }
}

impl<T: Encode> Encode for BTreeSet<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_len(self.len(), out);
        for item in self {
            item.encode_to(out);
        }
    }
}

impl<T: Decode + Ord> Decode for BTreeSet<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix()?;
        let mut set = BTreeSet::new();
        for _ in 0..n {
            let item = T::decode_from(r)?;
            if set.last().is_some_and(|last| *last >= item) {
                return Err(DecodeError::NonCanonical("set not strictly ascending"));
            }
            set.insert(item);
        }
        Ok(set)
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                v.encode_to(out);
            }
        }
    }
}

impl<T: Decode> Decode for Option<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(r)?)),
            tag => Err(DecodeError::UnknownTag {
                what: "option",
                tag,
            }),
        }
    }
}

impl<T: Encode + ?Sized> Encode for &T {
    fn encode_to(&self, out: &mut Vec<u8>) {
        (**self).encode_to(out);
    }
}

impl<T: Encode> Encode for Box<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        (**self).encode_to(out);
    }
}

impl<T: Decode> Decode for Box<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Box::new(T::decode_from(r)?))
    }
}

macro_rules! impl_tuple {
    ($($n:tt $t:ident),+) => {
        impl<$($t: Encode),+> Encode for ($($t,)+) {
            fn encode_to(&self, out: &mut Vec<u8>) {
                $(self.$n.encode_to(out);)+
            }
        }
        impl<$($t: Decode),+> Decode for ($($t,)+) {
            fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                Ok(($($t::decode_from(r)?,)+))
            }
        }
    };
}

impl_tuple!(0 A, 1 B);
impl_tuple!(0 A, 1 B, 2 C);
impl_tuple!(0 A, 1 B, 2 C, 3 D);
impl_tuple!(0 A, 1 B, 2 C, 3 D, 4 E);

/// Implements `Encode`/`Decode` for a struct by listing its fields in
/// declaration order.
#[macro_export]
macro_rules! impl_codec_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Encode for $ty {
            fn encode_to(&self, out: &mut Vec<u8>) {
                $($crate::codec::Encode::encode_to(&self.$field, out);)*
            }
        }
        impl $crate::codec::Decode for $ty {
            fn decode_from(
                r: &mut $crate::codec::Reader<'_>,
            ) -> Result<Self, $crate::codec::DecodeError> {
                Ok($ty { $($field: $crate::codec::Decode::decode_from(r)?,)* })
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integers_are_big_endian() {
        assert_eq!(0x0102_0304u32.encode(), vec![1, 2, 3, 4]);
        assert_eq!(1u64.encode(), vec![0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn unsorted_set_is_rejected() {
        let mut bytes = Vec::new();
        encode_len(2, &mut bytes);
        5u8.encode_to(&mut bytes);
        3u8.encode_to(&mut bytes);
        assert_eq!(
            BTreeSet::<u8>::decode(&bytes),
            Err(DecodeError::NonCanonical("set not strictly ascending"))
        );
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = 7u32.encode();
        bytes.push(0);
        assert_eq!(u32::decode(&bytes), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = Bytes(vec![1, 2, 3]).encode();
        assert!(matches!(
            Bytes::decode(&bytes[..5]),
            Err(DecodeError::UnexpectedEof { .. })
        ));
    }

    proptest! {
        #[test]
        fn nested_values_round_trip(
            v in proptest::collection::vec((any::<u64>(), proptest::option::of(".{0,8}")), 0..8),
            s in proptest::collection::btree_set(any::<u16>(), 0..8),
        ) {
            let value = (v.clone(), s.clone(), Bytes(vec![1, 2]));
            let bytes = value.encode();
            prop_assert_eq!(<(Vec<(u64, Option<String>)>, BTreeSet<u16>, Bytes)>::decode(&bytes).unwrap(), value);
        }
    }
}
