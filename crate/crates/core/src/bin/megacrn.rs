fn main() {
    std::process::exit(megacrn::cli::run(std::env::args_os()));
}
