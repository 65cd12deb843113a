fn main() {
    std::process::exit(fermat_morse::run());
}
