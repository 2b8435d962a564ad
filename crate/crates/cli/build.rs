fn main() {
    for (name, var) in [("NNSPEAKER_PROFILE", "PROFILE"), ("NNSPEAKER_TARGET", "TARGET")] {
        let value = std::env::var(var).unwrap_or_else(|_| "unknown".into());
        println!("cargo:rustc-env={name}={value}");
    }
}
