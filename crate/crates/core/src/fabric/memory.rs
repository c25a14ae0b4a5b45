use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

const PAGE: u64 = 4096;

/// Sparse byte-addressed memory. Untouched bytes read as zero.
#[derive(Default)]
pub(crate) struct PagedMemory {
    pages: BTreeMap<u64, Box<[u8; PAGE as usize]>>,
}

impl PagedMemory {
    pub(crate) fn read_into(&self, offset: u64, out: &mut [u8]) {
        let mut done = 0usize;
        while done < out.len() {
            let at = offset + done as u64;
            let page = at / PAGE;
            let in_page = (at % PAGE) as usize;
            let n = (PAGE as usize - in_page).min(out.len() - done);
            match self.pages.get(&page) {
                Some(p) => out[done..done + n].copy_from_slice(&p[in_page..in_page + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub(crate) fn write(&mut self, offset: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let at = offset + done as u64;
            let page = at / PAGE;
            let in_page = (at % PAGE) as usize;
            let n = (PAGE as usize - in_page).min(data.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| Box::new([0u8; PAGE as usize]));
            p[in_page..in_page + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub(crate) fn read_word(&self, offset: u64) -> u64 {
        let mut b = [0u8; 8];
        self.read_into(offset, &mut b);
        u64::from_le_bytes(b)
    }

    pub(crate) fn write_word(&mut self, offset: u64, w: u64) {
        self.write(offset, &w.to_le_bytes());
    }

    pub(crate) fn snapshot(&self, offset: u64, len: usize) -> Vec<u8> {
        let mut v = alloc::vec![0u8; len];
        self.read_into(offset, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_page_roundtrip() {
        let mut m = PagedMemory::default();
        let data: Vec<u8> = (0..100u8).collect();
        m.write(PAGE - 10, &data);
        assert_eq!(m.snapshot(PAGE - 10, 100), data);
        assert_eq!(m.snapshot(10 * PAGE, 4), alloc::vec![0; 4]);
    }

    #[test]
    fn words_are_little_endian() {
        let mut m = PagedMemory::default();
        m.write_word(16, 0x0102_0304_0506_0708);
        assert_eq!(m.snapshot(16, 1), alloc::vec![8]);
        assert_eq!(m.read_word(16), 0x0102_0304_0506_0708);
    }
}
