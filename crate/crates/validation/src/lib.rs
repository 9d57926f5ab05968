//! Home of the `acceptance` test target. Run it with
//! `cargo test -p periodic-validation --test acceptance`.
