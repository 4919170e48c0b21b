#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "cli.hpp"
#include "gsq/gse_pack.hpp"
#include "gsq/io.hpp"
#include "gsq/lora.hpp"
#include "gsq/rng.hpp"
#include "gsq/tensor_file.hpp"

namespace fs = std::filesystem;
using namespace gsq;
using Json = nlohmann::ordered_json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("gsq_cli_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

int run_gsq(std::vector<std::string> args) {
  args.insert(args.begin(), "gsq");
  return cli::run(args);
}

std::string slurp(const std::string& path) {
  const auto b = io::read_file(path);
  return std::string(b.begin(), b.end());
}

Json load_json(const std::string& path) { return Json::parse(slurp(path)); }

}  // namespace

TEST_CASE("usage and config errors exit with 1") {
  TempDir dir;
  CHECK(run_gsq({}) == cli::kUsage);
  CHECK(run_gsq({"nope"}) == cli::kUsage);
  CHECK(run_gsq({"mem", "--no-such-flag", "1"}) == cli::kUsage);
  CHECK(run_gsq({"mem", "--batch", "x", "--out-json", ""}) == cli::kUsage);
  CHECK(run_gsq({"gradcheck", "--bits", "9", "--out-json", "", "--out-plot", ""}) == cli::kUsage);
  CHECK(run_gsq({"quantize"}) == cli::kUsage);

  io::write_file_atomic(dir / "unknown.json", std::string(R"({"steps": 1, "colour": "red"})"));
  CHECK(run_gsq({"train", "--config", dir / "unknown.json"}) == cli::kUsage);
  io::write_file_atomic(dir / "broken.json", std::string(R"({"steps": )"));
  CHECK(run_gsq({"train", "--config", dir / "broken.json"}) == cli::kUsage);
  io::write_file_atomic(dir / "typed.json", std::string(R"({"steps": "many"})"));
  CHECK(run_gsq({"train", "--config", dir / "typed.json"}) == cli::kUsage);
  CHECK(run_gsq({"train", "--config", dir / "missing.json"}) == cli::kUsage);
  CHECK(run_gsq({"--help"}) == cli::kOk);
}

TEST_CASE("formats-compare") {
  TempDir dir;
  SUBCASE("zero tensor is flagged degenerate and exact") {
    save_tensor(dir / "zero.gsqt", Tensor{{4, 64}, std::vector<double>(256, 0.0)}, DType::kF32);
    REQUIRE(run_gsq({"formats-compare", "--synthetic", "false", "--inputs", dir / "zero.gsqt", "--out-csv",
                 dir / "f.csv", "--out-json", dir / "f.json", "--out-plot", dir / "p.csv"}) == cli::kOk);
    const Json j = load_json(dir / "f.json");
    REQUIRE(j["tensors"].size() == 1);
    CHECK(j["tensors"][0]["degenerate"] == true);
    for (const auto& f : j["tensors"][0]["formats"]) CHECK(f["max_abs_err"] == 0.0);
    const auto csv = slurp(dir / "f.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
    CHECK(csv.find(",inf,0,0,true") != std::string::npos);
  }
  SUBCASE("low local variance favours GSE-INT8, output is deterministic") {
    const std::vector<std::string> args{"formats-compare", "--spreads", "0,1", "--rows", "32",
                                        "--out-json", dir / "f.json", "--out-plot", ""};
    auto a = args;
    a.insert(a.end(), {"--out-csv", dir / "a.csv"});
    auto b = args;
    b.insert(b.end(), {"--out-csv", dir / "b.csv"});
    REQUIRE(run_gsq(a) == cli::kOk);
    REQUIRE(run_gsq(b) == cli::kOk);
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    for (const auto& t : load_json(dir / "f.json")["tensors"]) {
      double gse8 = 0.0;
      for (const auto& f : t["formats"])
        if (f["format"] == "GSE-INT8") gse8 = f["sqnr_db"];
      for (const auto& f : t["formats"])
        if (f["format"].get<std::string>().rfind("FP", 0) == 0) CHECK(gse8 > f["sqnr_db"].get<double>());
    }
  }
  SUBCASE("bad tensor file") {
    io::write_file_atomic(dir / "bad.gsqt", std::string("GSQT\x01\x07"));
    CHECK(run_gsq({"formats-compare", "--synthetic", "false", "--inputs", dir / "bad.gsqt"}) == cli::kFailure);
  }
}

TEST_CASE("quantize and dequantize") {
  TempDir dir;
  Rng rng(3);
  const Matrix m = rng.normal_matrix(5, 45, 0.3);  // 45 = 32 + 13: padded groups
  save_tensor(dir / "w.gsqt", matrix_to_tensor(m), DType::kF64);

  REQUIRE(run_gsq({"quantize", "--in", dir / "w.gsqt", "--out", dir / "w.gseb", "--bits", "6", "--stats-json",
               dir / "q.json"}) == cli::kOk);
  const Json st = load_json(dir / "q.json");
  CHECK(st["half_ulp_violations"] == 0);
  CHECK(st["elements_checked"] == 225);
  CHECK(st["pad_len"] == 19);
  const auto packed = io::read_file(dir / "w.gseb");
  CHECK(packed[28] == 19);  // pad_len field

  REQUIRE(run_gsq({"dequantize", "--in", dir / "w.gseb", "--out", dir / "w2.gsqt"}) == cli::kOk);
  const Tensor back = load_tensor(dir / "w2.gsqt");
  CHECK(back.dims == std::vector<std::uint64_t>{5, 45});
  CHECK(tensor_to_matrix(back) == dequantize_matrix(load_gseb(dir / "w.gseb")));

  // Quantizing the dequantized tensor reproduces the packed bytes.
  REQUIRE(run_gsq({"quantize", "--in", dir / "w2.gsqt", "--out", dir / "w3.gseb", "--bits", "6"}) == cli::kOk);
  CHECK(io::read_file(dir / "w3.gseb") == packed);

  REQUIRE(run_gsq({"quantize", "--in", dir / "w.gsqt", "--out", dir / "c.gseb", "--axis", "cols", "--group-size",
               "4"}) == cli::kOk);
  CHECK(load_gseb(dir / "c.gseb").axis() == GroupAxis::kAlongCols);

  save_tensor(dir / "cube.gsqt", Tensor{{2, 2, 2}, std::vector<double>(8, 1.0)}, DType::kF32);
  CHECK(run_gsq({"quantize", "--in", dir / "cube.gsqt", "--out", dir / "x.gseb"}) == cli::kFailure);
  CHECK(run_gsq({"quantize", "--in", dir / "w.gsqt", "--out", dir / "x.gseb", "--bits", "4"}) == cli::kUsage);
  CHECK(run_gsq({"quantize", "--in", dir / "w.gsqt", "--out", dir / "x.gseb", "--axis", "diag"}) == cli::kUsage);
  CHECK(run_gsq({"dequantize", "--in", dir / "w.gsqt", "--out", dir / "x.gsqt"}) == cli::kFailure);
  CHECK_FALSE(fs::exists(dir / "x.gseb"));
}

TEST_CASE("train artifacts") {
  TempDir dir;
  io::write_file_atomic(dir / "cfg.json", std::string(R"({"steps": 40, "rank": 2, "act_bits": 6, "lr": 0.005})"));
  const std::vector<std::string> base{"train", "--config", dir / "cfg.json", "--grad-bits", "7"};
  auto a = base;
  a.insert(a.end(), {"--out-json", dir / "a.json", "--out-plot", dir / "a.csv", "--checkpoint-dir", dir / "ck"});
  auto b = base;
  b.insert(b.end(), {"--out-json", dir / "b.json", "--out-plot", dir / "b.csv"});
  REQUIRE(run_gsq(a) == cli::kOk);
  REQUIRE(run_gsq(b) == cli::kOk);

  Json ja = load_json(dir / "a.json"), jb = load_json(dir / "b.json");
  CHECK(ja["config"]["steps"] == 40);
  CHECK(ja["config"]["grad_bits"] == 7);  // flag beats file
  CHECK(ja["config"]["act_bits"] == 6);
  CHECK(ja["run"]["config"]["quant"] == "4-6-7:a8:n16:r2");
  CHECK(ja["run"]["metrics"]["loss"].size() == 40);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  ja["run"].erase("wall_ms");
  jb["run"].erase("wall_ms");
  for (auto* j : {&ja, &jb}) (*j)["config"].erase("out_json"), (*j)["config"].erase("out_plot"),
                             (*j)["config"].erase("checkpoint_dir");
  CHECK(ja.dump() == jb.dump());
  CHECK(fs::exists(dir / "ck/layer0.gsql"));
  const auto ck = decode_checkpoint(io::read_file(dir / "ck/layer0.gsql"));
  CHECK(ck.config.to_string() == "4-6-7:a8:n16:r2");

  REQUIRE(run_gsq({"train", "--steps", "30", "--timing", "false", "--out-json", dir / "t1.json", "--out-plot", ""}) ==
          cli::kOk);
  REQUIRE(run_gsq({"train", "--steps", "30", "--timing", "false", "--out-json", dir / "t2.json", "--out-plot", ""}) ==
          cli::kOk);
  const auto t1 = slurp(dir / "t1.json");
  auto t2 = slurp(dir / "t2.json");
  const auto p = t2.find("t2.json");
  t2.replace(p, 7, "t1.json");
  CHECK(t1 == t2);

  CHECK(run_gsq({"train", "--steps", "300", "--lr", "50", "--identity", "true", "--out-json", dir / "d.json",
             "--out-plot", ""}) == cli::kFailure);
  CHECK(load_json(dir / "d.json")["run"]["failed"] == true);
}

TEST_CASE("sweep single point") {
  TempDir dir;
  REQUIRE(run_gsq({"sweep", "--bits", "8", "--ranks", "2", "--seeds", "1", "--steps", "20", "--ic", "16", "--oc", "8",
               "--group-size", "8", "--train-size", "64", "--eval-size", "32", "--out-csv", dir / "s.csv",
               "--out-json", dir / "s.json", "--out-plot", dir / "p.csv"}) == cli::kOk);
  const auto csv = slurp(dir / "s.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(csv.rfind("bits,rank,group,seed,final_loss,memory_bytes,dominated,wall_ms\n", 0) == 0);
  const Json j = load_json(dir / "s.json");
  REQUIRE(j["points"].size() == 1);
  CHECK(j["points"][0]["dominated"] == false);
  CHECK(j["config"]["ranks"] == Json::array({2}));
}

TEST_CASE("gradcheck and mem") {
  TempDir dir;
  REQUIRE(run_gsq({"gradcheck", "--out-json", dir / "g.json", "--out-plot", dir / "g.csv"}) == cli::kOk);
  const Json g = load_json(dir / "g.json");
  CHECK(g["max_rel"].get<double>() <= 1e-5);
  CHECK(g["pass"] == true);
  CHECK(run_gsq({"gradcheck", "--loss", "xent", "--ic", "12", "--oc", "5", "--out-json", "", "--out-plot", ""}) ==
        cli::kOk);
  CHECK(run_gsq({"gradcheck", "--eps", "0.1", "--out-json", "", "--out-plot", ""}) == cli::kUsage);

  REQUIRE(run_gsq({"mem", "--out-json", dir / "m.json", "--out-csv", dir / "m.csv", "--out-plot", ""}) == cli::kOk);
  const Json m = load_json(dir / "m.json");
  const double ratio = m["estimates"][1]["first_over_this"];
  CHECK(ratio >= 1.85 * 0.75);
  CHECK(ratio <= 1.85 * 1.25);
  CHECK(m["estimates"][0]["components"]["activations"]["formula"].get<std::string>().size() > 0);
  CHECK(run_gsq({"mem", "--model", "toy", "--configs", "4-8-8:r4,4-5-5:r4", "--out-json", "", "--out-csv", "",
             "--out-plot", ""}) == cli::kOk);
  CHECK(run_gsq({"mem", "--configs", "4-3-3", "--out-json", "", "--out-csv", "", "--out-plot", ""}) == cli::kUsage);
}
