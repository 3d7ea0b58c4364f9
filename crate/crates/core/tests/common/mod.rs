#![allow(dead_code, unused_imports)]

pub use medrec::oracle::{random_tokens, small_dims, small_world, SmallWorld as Small};
