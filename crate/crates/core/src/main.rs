fn main() {
    std::process::exit(tkgcast::run());
}
