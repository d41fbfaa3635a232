fn main() {
    svlp::cli::run();
}
