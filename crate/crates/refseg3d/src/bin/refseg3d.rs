fn main() -> anyhow::Result<()> {
    refseg3d::cli::run()
}
