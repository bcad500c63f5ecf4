//! Little-endian primitives shared by the binary file formats.

use std::io::{self, Read, Write};

use crate::autodiff::Scalar;

pub(crate) fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s<T: Scalar>(w: &mut impl Write, vals: &[T]) -> io::Result<()> {
    for &v in vals {
        w.write_all(&v.to_f32_storage().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<T: Scalar>(r: &mut impl Read, out: &mut [T]) -> io::Result<()> {
    let mut b = [0u8; 4];
    for slot in out {
        r.read_exact(&mut b)?;
        *slot = T::from_f32_storage(f32::from_le_bytes(b));
    }
    Ok(())
}
