pub mod correct;
pub mod evaluate;
pub mod info;
pub mod register_pair;
pub mod simulate;
