fn main() {
    // front end wired up in homog::cli
    std::process::exit(homog::run());
}
