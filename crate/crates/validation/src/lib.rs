//! Holds the `acceptance` test target, which checks each headline criterion
//! of the workbench end to end and prints one PASS/FAIL line per criterion.
//!
//! Run it with `cargo test -p mcbw-validation --test acceptance`.
