//! Fixed-capacity circular array of machine words.
//!
//! Logical indices are unbounded and map onto slots modulo the capacity. The
//! capacity need not be a power of two. Each slot is an `AtomicU64` so that a
//! stealer racing with the owner's wraparound write never observes a torn
//! value.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

use crate::Error;

/// The payload stored in a deque slot.
pub type Value = u64;

/// Shared counter of live buffers, used by tests to detect leaks.
pub type LiveCounter = Arc<AtomicUsize>;

pub struct RingBuffer {
    slots: Box<[AtomicU64]>,
    live: Option<LiveCounter>,
}

impl RingBuffer {
    /// Allocates `capacity` slots, each holding `fill`.
    pub fn new(capacity: usize, fill: Value) -> Result<Self, Error> {
        Self::with_counter(capacity, fill, None)
    }

    /// Like [`RingBuffer::new`], additionally counting this buffer (and every
    /// buffer grown from it) in `live` until it is dropped.
    pub fn with_counter(capacity: usize, fill: Value, live: Option<LiveCounter>) -> Result<Self, Error> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        let slots = (0..capacity).map(|_| AtomicU64::new(fill)).collect();
        if let Some(live) = &live {
            live.fetch_add(1, SeqCst);
        }
        Ok(Self { slots, live })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, i: u64) -> &AtomicU64 {
        // usize -> u64 is lossless on every supported target.
        &self.slots[(i % self.slots.len() as u64) as usize]
    }

    /// Reads the slot at logical index `i`.
    pub fn get(&self, i: u64) -> Value {
        self.slot(i).load(SeqCst)
    }

    /// Writes the slot at logical index `i`. Only the deque owner writes.
    pub fn set(&self, i: u64, v: Value) {
        self.slot(i).store(v, SeqCst)
    }

    /// Returns a new buffer of twice the capacity holding the circular slice
    /// `[top, bottom)` at the same logical indices. Slots outside the slice
    /// are zero. `self` is left untouched.
    pub fn grow(&self, top: u64, bottom: u64) -> Result<RingBuffer, Error> {
        let capacity = self.capacity();
        if top > bottom || bottom - top >= capacity as u64 {
            return Err(Error::GrowRange { top, bottom, capacity });
        }
        let grown = RingBuffer::with_counter(2 * capacity, 0, self.live.clone())?;
        for i in top..bottom {
            grown.set(i, self.get(i));
        }
        Ok(grown)
    }

    /// Copies the physical slots out, in slot order.
    pub fn to_vec(&self) -> Vec<Value> {
        self.slots.iter().map(|s| s.load(SeqCst)).collect()
    }
}

impl Drop for RingBuffer {
    fn drop(&mut self) {
        if let Some(live) = &self.live {
            live.fetch_sub(1, SeqCst);
        }
    }
}

impl fmt::Debug for RingBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_vec()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_slice(values: &[Value]) -> RingBuffer {
        let buf = RingBuffer::new(values.len(), 0).unwrap();
        for (i, v) in values.iter().enumerate() {
            buf.set(i as u64, *v);
        }
        buf
    }

    #[test]
    fn new_fills_every_slot() {
        assert_eq!(RingBuffer::new(4, 0).unwrap().to_vec(), vec![0, 0, 0, 0]);
        let one = RingBuffer::new(1, 9).unwrap();
        assert_eq!(one.capacity(), 1);
        assert_eq!(one.to_vec(), vec![9]);
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert_eq!(RingBuffer::new(0, 0).unwrap_err(), Error::ZeroCapacity);
    }

    #[test]
    fn get_indexes_modulo_capacity() {
        let zeros = RingBuffer::new(3, 0).unwrap();
        assert_eq!(zeros.get(7), 0);

        let ab = from_slice(&[10, 11]);
        assert_eq!(ab.get(3), 11);
        let a = from_slice(&[10]);
        assert_eq!(a.get(100), 10);
        let xyz = from_slice(&[20, 21, 22]);
        assert_eq!(xyz.get(2), 22);
    }

    #[test]
    fn set_wraps_around() {
        let buf = RingBuffer::new(2, 0).unwrap();
        buf.set(1, 7);
        assert_eq!(buf.to_vec(), vec![0, 7]);

        let buf = RingBuffer::new(2, 0).unwrap();
        buf.set(2, 7);
        assert_eq!(buf.to_vec(), vec![7, 0]);
        assert_eq!(buf.get(2), 7);
    }

    #[test]
    fn grow_copies_circular_slice() {
        let buf = from_slice(&[30, 31]);
        let grown = buf.grow(1, 2).unwrap();
        assert_eq!(grown.capacity(), 4);
        assert_eq!(grown.get(1), 31);
        assert_eq!(grown.to_vec(), vec![0, 31, 0, 0]);
        assert_eq!(buf.to_vec(), vec![30, 31]);
    }

    #[test]
    fn grow_of_empty_range_copies_nothing() {
        let buf = from_slice(&[5, 6, 7]);
        let grown = buf.grow(4, 4).unwrap();
        assert_eq!(grown.to_vec(), vec![0; 6]);
    }

    #[test]
    fn grow_rejects_bad_ranges() {
        let buf = RingBuffer::new(2, 0).unwrap();
        assert!(matches!(buf.grow(3, 2), Err(Error::GrowRange { .. })));
        assert!(matches!(buf.grow(1, 3), Err(Error::GrowRange { .. })));
    }

    #[test]
    fn live_counter_follows_grown_buffers() {
        let live = LiveCounter::default();
        let buf = RingBuffer::with_counter(2, 0, Some(live.clone())).unwrap();
        let grown = buf.grow(1, 1).unwrap();
        assert_eq!(live.load(SeqCst), 2);
        drop(buf);
        assert_eq!(live.load(SeqCst), 1);
        drop(grown);
        assert_eq!(live.load(SeqCst), 0);
    }

    proptest! {
        #[test]
        fn indexing_is_periodic(values in prop::collection::vec(any::<u64>(), 1..16), i in 0u64..1_000) {
            let buf = from_slice(&values);
            prop_assert_eq!(buf.get(i), buf.get(i + values.len() as u64));
        }

        #[test]
        fn set_touches_exactly_one_slot(len in 1usize..16, i in 0u64..1_000, v in 1u64..) {
            let buf = RingBuffer::new(len, 0).unwrap();
            buf.set(i, v);
            let changed: Vec<usize> = buf.to_vec().iter().enumerate()
                .filter(|(_, x)| **x != 0).map(|(k, _)| k).collect();
            prop_assert_eq!(changed, vec![(i % len as u64) as usize]);
        }
    }
}
