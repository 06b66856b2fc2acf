//! Hazard pointers for the arrays a growing deque leaves behind.
//!
//! A [`Shield`] owns one hazard slot. [`Shield::protect`] announces a pointer
//! read from a shared location and re-reads the location until the
//! announcement is known to cover the current value. [`Domain::retire`]
//! defers freeing an unpublished pointer; [`Domain::scan`] frees every
//! retired pointer that no slot announces.
//!
//! ```
//! use std::sync::Arc;
//! use std::sync::atomic::{AtomicPtr, Ordering::SeqCst};
//! use chaselev::reclamation::Domain;
//!
//! let domain = Arc::new(Domain::new());
//! let src = AtomicPtr::new(Box::into_raw(Box::new(7u64)));
//! let shield = domain.shield();
//! let p = shield.protect(&src);
//! src.store(Box::into_raw(Box::new(8u64)), SeqCst);
//! unsafe { domain.retire(p, 1) };
//! assert_eq!(domain.scan(), 0);
//! assert_eq!(unsafe { *p }, 7);
//! shield.clear();
//! assert_eq!(domain.scan(), 1);
//! # unsafe { drop(Box::from_raw(src.load(SeqCst))) };
//! ```

use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Mutex};

/// Retired-list length at which `retire` runs a scan by itself.
pub const DEFAULT_SCAN_THRESHOLD: usize = 64;

struct HazardSlot {
    ptr: AtomicPtr<()>,
    active: AtomicBool,
    next: *mut HazardSlot,
}

struct Retired {
    ptr: *mut (),
    size: usize,
    free: unsafe fn(*mut ()),
}

// SAFETY: a retired pointer is unreachable from shared memory; whichever thread
// runs the scan that frees it has exclusive access.
unsafe impl Send for Retired {}

unsafe fn free_boxed<T>(ptr: *mut ()) {
    drop(unsafe { Box::from_raw(ptr.cast::<T>()) });
}

pub struct Domain {
    slots: AtomicPtr<HazardSlot>,
    retired: Mutex<Vec<Retired>>,
    threshold: usize,
    retired_total: AtomicUsize,
    freed_total: AtomicUsize,
}

// SAFETY: slots are only linked in (never unlinked) before the domain drops,
// and every field they expose is atomic.
unsafe impl Send for Domain {}
unsafe impl Sync for Domain {}

impl Domain {
    pub fn new() -> Self {
        Self::with_threshold(DEFAULT_SCAN_THRESHOLD)
    }

    /// A threshold of 0 or 1 scans on every retire.
    pub fn with_threshold(threshold: usize) -> Self {
        Self {
            slots: AtomicPtr::new(ptr::null_mut()),
            retired: Mutex::new(Vec::new()),
            threshold,
            retired_total: AtomicUsize::new(0),
            freed_total: AtomicUsize::new(0),
        }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Hands out a shield with an empty slot, reusing an inactive slot if one
    /// exists.
    pub fn shield(self: &Arc<Self>) -> Shield {
        let mut cur = self.slots.load(SeqCst);
        while let Some(slot) = unsafe { cur.as_ref() } {
            if slot.active.compare_exchange(false, true, SeqCst, SeqCst).is_ok() {
                return Shield::new(self.clone(), cur);
            }
            cur = slot.next;
        }
        let slot = Box::into_raw(Box::new(HazardSlot {
            ptr: AtomicPtr::new(ptr::null_mut()),
            active: AtomicBool::new(true),
            next: ptr::null_mut(),
        }));
        let mut head = self.slots.load(SeqCst);
        loop {
            unsafe { (*slot).next = head };
            match self.slots.compare_exchange(head, slot, SeqCst, SeqCst) {
                Ok(_) => return Shield::new(self.clone(), slot),
                Err(actual) => head = actual,
            }
        }
    }

    /// Defers freeing `ptr` (a `Box<T>`) until no shield announces it.
    ///
    /// # Safety
    ///
    /// `ptr` must come from `Box::into_raw`, must already be unreachable from
    /// every location shields protect, and must be retired at most once.
    pub unsafe fn retire<T: Send>(&self, ptr: *mut T, size: usize) {
        let len = {
            let mut retired = self.retired.lock().unwrap();
            debug_assert!(retired.iter().all(|r| r.ptr != ptr.cast()), "pointer retired twice");
            retired.push(Retired { ptr: ptr.cast(), size, free: free_boxed::<T> });
            retired.len()
        };
        self.retired_total.fetch_add(1, SeqCst);
        if len >= self.threshold {
            self.scan();
        }
    }

    fn hazards(&self) -> Vec<*mut ()> {
        let mut out = Vec::new();
        let mut cur = self.slots.load(SeqCst);
        while let Some(slot) = unsafe { cur.as_ref() } {
            let p = slot.ptr.load(SeqCst);
            if !p.is_null() {
                out.push(p);
            }
            cur = slot.next;
        }
        out
    }

    /// Frees the retired pointers absent from a snapshot of the hazard slots
    /// and returns how many were freed.
    pub fn scan(&self) -> usize {
        let candidates = std::mem::take(&mut *self.retired.lock().unwrap());
        if candidates.is_empty() {
            return 0;
        }
        let hazards = self.hazards();
        let (keep, free): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|r| hazards.contains(&r.ptr));
        let freed = free.len();
        for r in free {
            // SAFETY: retired, so no new announcement can validate against it,
            // and no slot announced it at the snapshot.
            unsafe { (r.free)(r.ptr) };
        }
        self.retired.lock().unwrap().extend(keep);
        self.freed_total.fetch_add(freed, SeqCst);
        freed
    }

    /// Retired pointers not yet freed.
    pub fn pending(&self) -> usize {
        self.retired.lock().unwrap().len()
    }

    /// Sum of the `size` arguments of pointers not yet freed.
    pub fn pending_size(&self) -> usize {
        self.retired.lock().unwrap().iter().map(|r| r.size).sum()
    }

    pub fn retired_total(&self) -> usize {
        self.retired_total.load(SeqCst)
    }

    pub fn freed_total(&self) -> usize {
        self.freed_total.load(SeqCst)
    }
}

impl Default for Domain {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Domain {
    fn drop(&mut self) {
        // Shields hold an Arc, so none remain.
        for r in self.retired.get_mut().unwrap().drain(..) {
            unsafe { (r.free)(r.ptr) };
        }
        let mut cur = *self.slots.get_mut();
        while !cur.is_null() {
            let slot = unsafe { Box::from_raw(cur) };
            cur = slot.next;
        }
    }
}

/// One hazard slot, used by one thread at a time.
pub struct Shield {
    domain: Arc<Domain>,
    slot: NonNull<HazardSlot>,
}

// SAFETY: the slot outlives the shield (the domain Arc keeps it alive) and is
// only touched through atomics. `Shield` stays `!Sync`: one thread per slot.
unsafe impl Send for Shield {}

impl Shield {
    fn new(domain: Arc<Domain>, slot: *mut HazardSlot) -> Self {
        Self { domain, slot: NonNull::new(slot).unwrap() }
    }

    fn slot(&self) -> &HazardSlot {
        unsafe { self.slot.as_ref() }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Announces the current value of `src` and returns it once a re-read of
    /// `src` confirms the announcement. The result stays allocated until this
    /// shield is cleared, re-protects, or drops.
    pub fn protect<T>(&self, src: &AtomicPtr<T>) -> *mut T {
        let mut p = src.load(SeqCst);
        loop {
            self.slot().ptr.store(p.cast(), SeqCst);
            let q = src.load(SeqCst);
            if q == p {
                return p;
            }
            p = q;
        }
    }

    /// The pointer currently announced, or null.
    pub fn protected(&self) -> *mut () {
        self.slot().ptr.load(SeqCst)
    }

    /// Withdraws the announcement. Idempotent.
    pub fn clear(&self) {
        self.slot().ptr.store(ptr::null_mut(), SeqCst);
    }
}

impl Drop for Shield {
    fn drop(&mut self) {
        self.clear();
        self.slot().active.store(false, SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    struct Tracked(Arc<AtomicUsize>);

    impl Drop for Tracked {
        fn drop(&mut self) {
            self.0.fetch_add(1, SeqCst);
        }
    }

    fn tracked(drops: &Arc<AtomicUsize>) -> *mut Tracked {
        Box::into_raw(Box::new(Tracked(drops.clone())))
    }

    fn manual() -> Arc<Domain> {
        Arc::new(Domain::with_threshold(usize::MAX))
    }

    #[test]
    fn empty_domain_scans_nothing() {
        assert_eq!(manual().scan(), 0);
    }

    #[test]
    fn unprotected_retiree_is_freed() {
        let d = manual();
        let drops = Arc::new(AtomicUsize::new(0));
        unsafe { d.retire(tracked(&drops), 1) };
        assert_eq!(d.pending(), 1);
        assert_eq!(d.scan(), 1);
        assert_eq!(drops.load(SeqCst), 1);
        assert_eq!(d.pending(), 0);
    }

    #[test]
    fn domains_are_independent() {
        let (a, b) = (manual(), manual());
        let drops = Arc::new(AtomicUsize::new(0));
        let p = tracked(&drops);
        let src = AtomicPtr::new(p);
        let _shield = b.shield();
        let sa = a.shield();
        sa.protect(&src);
        unsafe { b.retire(p, 1) };
        // The shield belongs to `a`, so `b` frees regardless.
        assert_eq!(b.scan(), 1);
        assert_eq!(drops.load(SeqCst), 1);
    }

    #[test]
    fn new_shield_is_empty_and_slots_are_distinct() {
        let d = manual();
        let shields: Vec<_> = (0..4).map(|_| d.shield()).collect();
        assert!(shields.iter().all(|s| s.protected().is_null()));
        let mut slots: Vec<_> = shields.iter().map(|s| s.slot.as_ptr()).collect();
        slots.dedup();
        assert_eq!(slots.len(), 4);
    }

    #[test]
    fn dropped_shield_slot_is_reused() {
        let d = manual();
        let first = d.shield().slot.as_ptr();
        let second = d.shield();
        assert_eq!(second.slot.as_ptr(), first);
    }

    #[test]
    fn protection_blocks_reclamation_until_cleared() {
        let d = manual();
        let drops = Arc::new(AtomicUsize::new(0));
        let src = AtomicPtr::new(tracked(&drops));
        let s = d.shield();
        let p = s.protect(&src);
        assert_eq!(p, src.load(SeqCst));
        src.store(ptr::null_mut(), SeqCst);
        unsafe { d.retire(p, 1) };
        assert_eq!(d.scan(), 0);
        assert_eq!(d.scan(), 0);
        // Still readable.
        assert_eq!(unsafe { (*p).0.load(SeqCst) }, 0);
        s.clear();
        s.clear();
        assert_eq!(d.scan(), 1);
        assert_eq!(drops.load(SeqCst), 1);
    }

    #[test]
    fn dropping_shield_releases_protection() {
        let d = manual();
        let drops = Arc::new(AtomicUsize::new(0));
        let src = AtomicPtr::new(tracked(&drops));
        let s = d.shield();
        let p = s.protect(&src);
        unsafe { d.retire(p, 1) };
        drop(s);
        assert_eq!(d.scan(), 1);
    }

    #[test]
    fn scan_frees_only_unprotected() {
        let d = manual();
        let drops = Arc::new(AtomicUsize::new(0));
        let ptrs: Vec<_> = (0..3).map(|_| tracked(&drops)).collect();
        let src = AtomicPtr::new(ptrs[1]);
        let s = d.shield();
        s.protect(&src);
        for p in &ptrs {
            unsafe { d.retire(*p, 1) };
        }
        assert_eq!(d.scan(), 2);
        assert_eq!(d.pending(), 1);
        drop(s);
        assert_eq!(d.scan(), 1);
        assert_eq!(drops.load(SeqCst), 3);
    }

    #[test]
    fn protect_follows_a_swapped_source() {
        // Announce p1, observe p2 on the re-read, loop and settle on p2.
        let d = manual();
        let drops = Arc::new(AtomicUsize::new(0));
        let (p1, p2) = (tracked(&drops), tracked(&drops));
        let src = AtomicPtr::new(p2);
        let s = d.shield();
        s.slot().ptr.store(p1.cast(), SeqCst);
        assert_eq!(s.protect(&src), p2);
        assert_eq!(s.protected(), p2.cast());
        unsafe {
            drop(Box::from_raw(p1));
            drop(Box::from_raw(p2));
        }
    }

    #[test]
    fn threshold_triggers_scan_and_counts_add_up() {
        let d = Arc::new(Domain::with_threshold(8));
        let drops = Arc::new(AtomicUsize::new(0));
        for _ in 0..100 {
            unsafe { d.retire(tracked(&drops), 1) };
        }
        assert!(d.pending() < 8);
        d.scan();
        assert_eq!(drops.load(SeqCst), 100);
        assert_eq!(d.retired_total(), 100);
        assert_eq!(d.freed_total(), 100);
    }

    #[test]
    fn domain_drop_frees_pending() {
        let drops = Arc::new(AtomicUsize::new(0));
        {
            let d = manual();
            for _ in 0..5 {
                unsafe { d.retire(tracked(&drops), 1) };
            }
        }
        assert_eq!(drops.load(SeqCst), 5);
    }

    #[test]
    fn concurrent_protect_retire_scan() {
        // Readers protect and dereference while a writer swaps and retires.
        let d = Arc::new(Domain::with_threshold(4));
        let src = Arc::new(AtomicPtr::new(Box::into_raw(Box::new(0u64))));
        let readers: Vec<_> = (0..3)
            .map(|_| {
                let (d, src) = (d.clone(), src.clone());
                thread::spawn(move || {
                    let s = d.shield();
                    let mut last = 0;
                    for _ in 0..20_000 {
                        let p = s.protect(&src);
                        let v = unsafe { *p };
                        assert!(v >= last);
                        last = v;
                        s.clear();
                    }
                })
            })
            .collect();
        for i in 1..=20_000u64 {
            let old = src.swap(Box::into_raw(Box::new(i)), SeqCst);
            unsafe { d.retire(old, 1) };
        }
        for r in readers {
            r.join().unwrap();
        }
        d.scan();
        assert_eq!(d.pending(), 0);
        unsafe { drop(Box::from_raw(src.load(SeqCst))) };
    }
}
