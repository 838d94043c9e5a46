fn main() {
    std::process::exit(mosaic_codec::cli::run(std::env::args_os()));
}
