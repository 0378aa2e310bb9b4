//! Address spaces and bit-field helpers.
//!
//! Lines are 64 bytes and pages 4 KiB throughout. The low 12 bits of an
//! address survive both translation layers, so the line-within-page index
//! (bits [11:6]) is the only set-index information a guest controls.

use std::fmt;

pub const LINE_SHIFT: u32 = 6;
pub const PAGE_SHIFT: u32 = 12;
pub const LINE_SIZE: u64 = 1 << LINE_SHIFT;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const LINES_PER_PAGE: u64 = PAGE_SIZE / LINE_SIZE;
pub const PAGE_OFFSET_MASK: u64 = PAGE_SIZE - 1;

/// The three address spaces, ordered by translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Space {
    Gva,
    Gpa,
    Hpa,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Gva => "GVA",
            Space::Gpa => "GPA",
            Space::Hpa => "HPA",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Address {
    pub value: u64,
    pub space: Space,
}

impl Address {
    pub const fn new(value: u64, space: Space) -> Self {
        Self { value, space }
    }

    pub const fn gva(value: u64) -> Self {
        Self::new(value, Space::Gva)
    }

    pub const fn gpa(value: u64) -> Self {
        Self::new(value, Space::Gpa)
    }

    pub const fn hpa(value: u64) -> Self {
        Self::new(value, Space::Hpa)
    }

    pub const fn page_number(&self) -> u64 {
        self.value >> PAGE_SHIFT
    }

    /// Bits [11:0].
    pub const fn page_offset(&self) -> u64 {
        self.value & PAGE_OFFSET_MASK
    }

    /// Bits [5:0].
    pub const fn line_offset(&self) -> u64 {
        self.value & (LINE_SIZE - 1)
    }

    /// Bits [11:6]: which of the 64 aligned page offsets the address sits at.
    pub const fn line_in_page(&self) -> u64 {
        (self.value & PAGE_OFFSET_MASK) >> LINE_SHIFT
    }

    pub const fn is_line_aligned(&self) -> bool {
        self.line_offset() == 0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:#x}", self.space, self.value)
    }
}

/// Replace bits [11:6] of `addr` with the aligned page offset `offset`.
#[inline]
pub const fn with_page_offset(addr: u64, offset: u64) -> u64 {
    (addr & !PAGE_OFFSET_MASK) | (offset & PAGE_OFFSET_MASK & !(LINE_SIZE - 1))
}

#[inline]
pub const fn page_base(addr: u64) -> u64 {
    addr & !PAGE_OFFSET_MASK
}

/// Every aligned page offset (0x000, 0x040, ..., 0xfc0).
pub fn aligned_offsets() -> impl Iterator<Item = u64> {
    (0..LINES_PER_PAGE).map(|i| i * LINE_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_extraction() {
        let a = Address::gva(0x1_2a7c);
        assert_eq!(a.page_number(), 0x12);
        assert_eq!(a.page_offset(), 0xa7c);
        assert_eq!(a.line_offset(), 0x3c);
        assert_eq!(a.line_in_page(), 0x29);
        assert!(!a.is_line_aligned());
        assert!(Address::hpa(0xf040).is_line_aligned());
    }

    #[test]
    fn offset_replacement() {
        assert_eq!(with_page_offset(0x5000, 0x40), 0x5040);
        assert_eq!(with_page_offset(0x5fc0, 0x0), 0x5000);
        assert_eq!(aligned_offsets().count(), 64);
        assert_eq!(aligned_offsets().last(), Some(0xfc0));
    }
}
