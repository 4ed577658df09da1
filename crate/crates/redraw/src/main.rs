fn main() {
    redraw::harness::cli::main();
}
