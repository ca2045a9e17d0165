//! Placeholder; filled in once the model code lands.
fn main() {}
