#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod abd;
pub mod checker;
pub mod fabric;
pub mod innout;
pub mod kvstore;
pub mod maxreg;
pub mod safeguess;
pub mod trace;
pub mod tslock;
pub mod value;
