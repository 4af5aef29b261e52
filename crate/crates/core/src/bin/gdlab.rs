fn main() {
    eprintln!("gdlab: cli not wired up yet");
    std::process::exit(2);
}
