// End-to-end checks of the command-line binary: exit codes, report files and
// rerun determinism. The binary path arrives as the first test argument.
#define DOCTEST_CONFIG_IMPLEMENT
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string g_bin;

int run(const std::string& args) {
    std::string cmd = g_bin + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    if (status < 0) return -1;
#ifdef _WIN32
    return status;
#else
    return WEXITSTATUS(status);
#endif
}

// overrides shrinking every dimension so one epoch takes well under a second
const std::string kTiny =
    "--set model.video_layers=2 --set model.text_layers=2 "
    "--set model.d_v=8 --set model.d_l=8 --set model.d_vl=4 "
    "--set model.patch=4 --set model.image=8 --set model.frames=2 "
    "--set model.heads_v=2 --set model.heads_l=2 --set model.max_text_len=8 "
    "--set placement.video_layers=1,2 --set placement.text_layers=1,2 "
    "--set data.per_class_train=2 --set data.per_class_val=1 "
    "--set data.per_class_holdout=1 "
    "--set train.epochs=1 --set train.batch_size=2";

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("usage errors exit with status 2") {
    CHECK(run("") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("train --no-such-flag") == 2);
    CHECK(run("eval") == 2);  // --checkpoint is required
    CHECK(run("train --set bogus.key=1") == 2);
    CHECK(run("train --set train.lr=fast") == 2);
    CHECK(run("train --config does_not_exist.cfg") == 2);
    CHECK(run("ablate --suite no_such_suite") == 2);
}

TEST_CASE("help exits with status 0") {
    CHECK(run("--help") == 0);
    CHECK(run("train --help") == 0);
}

TEST_CASE("train writes its reports and reruns reproduce them") {
    TempDir a("train_a"), b("train_b");
    REQUIRE(run("train " + kTiny + " --out " + a.str()) == 0);
    for (const char* f : {"metrics.tsv", "config.cfg", "final.ckpt", "vocab.txt"})
        CHECK(fs::exists(a.path / f));

    REQUIRE(run("train " + kTiny + " --out " + b.str()) == 0);
    CHECK(read_bytes(a.path / "metrics.tsv") == read_bytes(b.path / "metrics.tsv"));
    CHECK(read_bytes(a.path / "final.ckpt") == read_bytes(b.path / "final.ckpt"));
}

TEST_CASE("eval and zeroshot read a trained checkpoint") {
    TempDir d("eval");
    REQUIRE(run("train " + kTiny + " --out " + d.str()) == 0);
    std::string ckpt = (d.path / "final.ckpt").string();

    CHECK(run("eval --checkpoint " + ckpt + " --out " + d.str()) == 0);
    CHECK(fs::exists(d.path / "eval.tsv"));
    CHECK(run("zeroshot --checkpoint " + ckpt + " --out " + d.str()) == 0);
    CHECK(fs::exists(d.path / "zeroshot.tsv"));
    CHECK(run("params --checkpoint " + ckpt) == 0);
}

TEST_CASE("runtime failures exit with status 1") {
    CHECK(run("eval --checkpoint does_not_exist.ckpt") == 1);

    TempDir d("corrupt");
    REQUIRE(run("train " + kTiny + " --out " + d.str()) == 0);
    fs::path ckpt = d.path / "final.ckpt";
    std::string bytes = read_bytes(ckpt);
    bytes[0] = 'X';  // break the magic header
    write_bytes(ckpt, bytes);
    CHECK(run("eval --checkpoint " + ckpt.string()) == 1);

    write_bytes(ckpt, read_bytes(ckpt).substr(0, 10));
    CHECK(run("zeroshot --checkpoint " + ckpt.string()) == 1);
}

TEST_CASE("gradcheck on the default tiny model passes") {
    CHECK(run("gradcheck") == 0);
    CHECK(run("gradcheck --tol 1e-12") == 1);  // impossible tolerance must fail
}

TEST_CASE("params and gen-data report without training") {
    TempDir d("gen");
    CHECK(run("params " + kTiny) == 0);
    CHECK(run("gen-data " + kTiny + " --out " + d.str()) == 0);
    CHECK(fs::exists(d.path / "dataset.tsv"));
    std::string tsv = read_bytes(d.path / "dataset.tsv");
    CHECK(tsv.find("moving left") != std::string::npos);
    CHECK(tsv.find("holdout") != std::string::npos);
}

int main(int argc, char** argv) {
    doctest::Context ctx;
    ctx.applyCommandLine(argc, argv);
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (!a.empty() && a[0] != '-') g_bin = a;
    }
    if (g_bin.empty()) {
        std::fprintf(stderr, "usage: test_cli <path-to-m2va-binary>\n");
        return 1;
    }
    return ctx.run();
}
