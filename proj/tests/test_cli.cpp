// End-to-end tests for the railnet binary. Each case shells out to the real
// executable (path injected as RAILNET_BIN at compile time) and checks the
// JSON it prints plus its exit code: 0 ok, 1 usage, 2 bad input data.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>

#include <json.hpp>

#include "railnet/imgpipe.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kDir = "cli_tmp";

struct CmdResult {
  int status = -1;
  std::string out;
};

CmdResult run(const std::string& args) {
  std::string cmd = std::string("'") + RAILNET_BIN + "' " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  int rc = pclose(pipe);
  r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return r;
}

json jline(const std::string& out) {
  // Commands print exactly one JSON object on stdout.
  return json::parse(out);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

size_t line_count(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  size_t n = 0;
  std::string line;
  while (std::getline(f, line)) n++;
  return n;
}

struct Pipeline {
  std::string model, fused, qplan, data, image;
};

// Builds (once) the artifacts most cases share: canonical model, fused model,
// synthetic calibration images, and a quantization plan. Idempotent on disk so
// any case can run standalone.
const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline q;
    q.model = kDir + "/model.rnet";
    q.fused = kDir + "/fused.rnet";
    q.qplan = kDir + "/plan.qplan";
    q.data = kDir + "/camp";
    q.image = q.data + "/synth_0000.png";
    fs::create_directories(kDir);
    REQUIRE(run("init -o " + q.model + " --seed 42").status == 0);
    REQUIRE(run("fuse " + q.model + " -o " + q.fused).status == 0);
    REQUIRE(run("dataset synth -o " + q.data + " -n 12 --seed 42").status == 0);
    REQUIRE(run("calibrate --model " + q.fused + " --data " + q.data + " -o " +
                q.qplan)
                .status == 0);
    return q;
  }();
  return p;
}

}  // namespace

TEST_CASE("help exits 0, missing subcommand and bad flags exit 1") {
  CmdResult help = run("--help");
  CHECK(help.status == 0);
  CHECK(help.out.find("init") != std::string::npos);
  CHECK(help.out.find("infer") != std::string::npos);

  CHECK(run("").status == 1);
  CHECK(run("--no-such-flag").status == 1);
  CHECK(run("infer --model x").status == 1);        // missing required image
  CHECK(run("dataset").status == 1);                // needs a sub-subcommand
  CHECK(run("dataset augment a b --rotate 9").status == 1);
}

TEST_CASE("init writes a deterministic canonical model") {
  fs::create_directories(kDir);
  CmdResult a = run("init -o " + kDir + "/a.rnet --seed 42");
  REQUIRE(a.status == 0);
  json ja = jline(a.out);
  CHECK(ja["layers"] == 57);
  CHECK(ja["macs"] == 23167104);
  CHECK(ja["written"] == kDir + "/a.rnet");

  CmdResult b = run("init -o " + kDir + "/b.rnet --seed 42");
  REQUIRE(b.status == 0);
  CHECK(slurp(kDir + "/a.rnet") == slurp(kDir + "/b.rnet"));

  CmdResult c = run("init -o " + kDir + "/c.rnet --seed 43");
  REQUIRE(c.status == 0);
  CHECK(slurp(kDir + "/a.rnet") != slurp(kDir + "/c.rnet"));
}

TEST_CASE("fuse collapses the bn/relu stack and is idempotent") {
  const Pipeline& p = pipeline();
  CmdResult first = run("fuse " + p.model + " -o " + kDir + "/f1.rnet");
  REQUIRE(first.status == 0);
  json j1 = jline(first.out);
  CHECK(j1["layers_before"] == 57);
  CHECK(j1["layers_after"] == 33);
  CHECK(slurp(kDir + "/f1.rnet") == slurp(p.fused));

  CmdResult again = run("fuse " + kDir + "/f1.rnet -o " + kDir + "/f2.rnet");
  REQUIRE(again.status == 0);
  json j2 = jline(again.out);
  CHECK(j2["layers_before"] == 33);
  CHECK(j2["layers_after"] == 33);
  CHECK(slurp(kDir + "/f2.rnet") == slurp(kDir + "/f1.rnet"));

  CHECK(run("fuse " + kDir + "/does_not_exist.rnet -o " + kDir + "/x.rnet")
            .status == 2);
}

TEST_CASE("calibrate and quantize produce a clean plan on synthetic data") {
  const Pipeline& p = pipeline();
  CmdResult cal = run("calibrate --model " + p.fused + " --data " + p.data +
                      " -o " + kDir + "/plan2.qplan");
  REQUIRE(cal.status == 0);
  CHECK(jline(cal.out)["images"] == 12);
  CHECK(slurp(kDir + "/plan2.qplan") == slurp(p.qplan));

  CmdResult q = run("quantize --model " + p.fused + " --qplan " + p.qplan);
  REQUIRE(q.status == 0);
  CHECK(jline(q.out)["saturation_count"] == 0);

  CmdResult qp = run("quantize --model " + p.fused + " --qplan " + p.qplan +
                     " --data " + p.data);
  REQUIRE(qp.status == 0);
  json jp = jline(qp.out);
  CHECK(jp["images"] == 12);
  CHECK(jp["top1_match_rate"] == 1.0);
  double mean_err = jp["mean_abs_logit_err"].get<double>();
  double max_err = jp["max_abs_logit_err"].get<double>();
  CHECK(mean_err >= 0.0);
  CHECK(mean_err <= max_err);
  CHECK(max_err < 0.1);

  // calibrating on an empty directory is a data error
  fs::create_directories(kDir + "/empty");
  CHECK(run("calibrate --model " + p.fused + " --data " + kDir +
            "/empty -o " + kDir + "/nope.qplan")
            .status == 2);
}

TEST_CASE("infer modes agree on class and the fx paths agree exactly") {
  const Pipeline& p = pipeline();
  std::string common = "infer --model " + p.fused + " " + p.image +
                       " --runs 1 --warmups 0";

  CmdResult fl = run(common + " --float");
  REQUIRE(fl.status == 0);
  json jf = jline(fl.out);
  CHECK(jf["mode"] == "float");
  CHECK(jf["macs"] == 23167104);
  CHECK(jf["latency_ms"].get<double>() >= 0.0);
  CHECK(jf["gops"].get<double>() > 0.0);

  CmdResult nv = run(common + " --naive --qplan " + p.qplan);
  REQUIRE(nv.status == 0);
  json jn = jline(nv.out);
  CHECK(jn["mode"] == "naive");
  CHECK(jn["class"] == jf["class"]);

  CmdResult tl = run(common + " --tiled --qplan " + p.qplan);
  REQUIRE(tl.status == 0);
  json jt = jline(tl.out);
  CHECK(jt["mode"] == "tiled");
  CHECK(jt["class"] == jn["class"]);
  CHECK(jt["class_name"] == jn["class_name"]);
  CHECK(jt["confidence"] == jn["confidence"]);
  CHECK(jt["saturation_count"] == jn["saturation_count"]);

  // default mode is tiled
  CmdResult dt = run(common + " --qplan " + p.qplan);
  REQUIRE(dt.status == 0);
  CHECK(jline(dt.out)["mode"] == "tiled");

  CHECK(run(common).status == 2);  // fixed point needs a plan
  CHECK(run("infer --model " + kDir + "/missing.rnet " + p.image + " --float")
            .status == 2);
  CHECK(run("infer --model " + p.fused + " " + kDir +
            "/missing.png --float")
            .status == 2);
}

TEST_CASE("bench reports roofline counters") {
  const Pipeline& p = pipeline();
  CmdResult b = run("bench --model " + p.fused + " --qplan " + p.qplan + " " +
                    p.image + " --runs 2 --warmups 1 --power-watts 5.5");
  REQUIRE(b.status == 0);
  json j = jline(b.out);
  CHECK(j["macs"] == 23167104);
  CHECK(j["tiles_executed"].get<long long>() >= 1);
  CHECK(j["bytes_loaded"].get<long long>() > 0);
  CHECK(j["bytes_stored"].get<long long>() > 0);
  CHECK(j["wall_time_ms"].get<double>() > 0.0);
  CHECK(j["gops"].get<double>() > 0.0);
  double gpw = j["gops_per_watt"].get<double>();
  CHECK(gpw == doctest::Approx(j["gops"].get<double>() / 5.5));

  CmdResult nb = run("bench --model " + p.fused + " --qplan " + p.qplan + " " +
                     p.image + " --runs 1 --warmups 0");
  REQUIRE(nb.status == 0);
  CHECK_FALSE(jline(nb.out).contains("gops_per_watt"));
}

TEST_CASE("dataset synth is seed-deterministic") {
  fs::create_directories(kDir);
  REQUIRE(run("dataset synth -o " + kDir + "/d1 -n 3 --seed 7").status == 0);
  REQUIRE(run("dataset synth -o " + kDir + "/d2 -n 3 --seed 7").status == 0);
  REQUIRE(run("dataset synth -o " + kDir + "/d3 -n 3 --seed 8").status == 0);
  for (int i = 0; i < 3; i++) {
    char name[32];
    std::snprintf(name, sizeof name, "/synth_%04d.png", i);
    CHECK(slurp(kDir + "/d1" + name) == slurp(kDir + "/d2" + name));
    CHECK(slurp(kDir + "/d1" + name) != slurp(kDir + "/d3" + name));
  }
}

TEST_CASE("dataset split writes 88/6/6 manifests deterministically") {
  fs::create_directories(kDir);
  REQUIRE(run("dataset synth -o " + kDir + "/pool -n 30 --seed 42").status == 0);

  CmdResult s = run("dataset split " + kDir + "/pool -o " + kDir + "/man");
  REQUIRE(s.status == 0);
  json j = jline(s.out);
  CHECK(j["train"] == 26);
  CHECK(j["test"] == 2);
  CHECK(j["val"] == 2);
  CHECK(line_count(kDir + "/man/train.txt") == 26);
  CHECK(line_count(kDir + "/man/test.txt") == 2);
  CHECK(line_count(kDir + "/man/val.txt") == 2);

  CmdResult again = run("dataset split " + kDir + "/pool -o " + kDir + "/man2");
  REQUIRE(again.status == 0);
  CHECK(slurp(kDir + "/man/train.txt") == slurp(kDir + "/man2/train.txt"));
  CHECK(slurp(kDir + "/man/val.txt") == slurp(kDir + "/man2/val.txt"));

  CmdResult other = run("dataset split " + kDir + "/pool -o " + kDir +
                        "/man3 --seed 43");
  REQUIRE(other.status == 0);
  CHECK(slurp(kDir + "/man/train.txt") != slurp(kDir + "/man3/train.txt"));

  CHECK(run("dataset split " + kDir + "/no_such_dir").status == 2);
}

TEST_CASE("dataset augment matches the library call byte for byte") {
  const Pipeline& p = pipeline();
  CmdResult a = run("dataset augment " + p.image + " " + kDir +
                    "/aug.png --blur --noise --noise-sigma 6 --flip h "
                    "--rotate 1 --seed 99");
  REQUIRE(a.status == 0);
  CHECK(jline(a.out)["written"] == kDir + "/aug.png");

  railnet::ImageU8 img = railnet::load_image(p.image);
  railnet::AugmentSpec spec;
  spec.blur = true;
  spec.noise = true;
  spec.noise_sigma = 6.0;
  spec.flip = railnet::AugmentSpec::Flip::Horizontal;
  spec.rotate_k = 1;
  spec.seed = 99;
  railnet::save_png(railnet::augment(img, spec), kDir + "/aug_ref.png");
  CHECK(slurp(kDir + "/aug.png") == slurp(kDir + "/aug_ref.png"));
}

// Kills a forked server even when an assertion unwinds past the test body;
// a leaked child would keep ctest waiting on the inherited stderr pipe.
struct ChildProc {
  pid_t pid = -1;
  ~ChildProc() {
    if (pid > 0) {
      kill(pid, SIGTERM);
      waitpid(pid, nullptr, 0);
    }
  }
};

TEST_CASE("serve accepts reports from send and lists them back") {
  fs::create_directories(kDir);
  std::string log = kDir + "/serve.jsonl";
  std::string serve_out = kDir + "/serve_stdout.txt";
  fs::remove(log);
  fs::remove(serve_out);  // a stale copy would hand us last run's port

  ChildProc server;
  pid_t pid = server.pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    int fd = open(serve_out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) _exit(90);
    dup2(fd, STDOUT_FILENO);
    close(fd);
    execl(RAILNET_BIN, "railnet", "serve", "--port", "0", "--log", log.c_str(),
          (char*)nullptr);
    _exit(91);
  }

  // the server prints its ephemeral port as the first JSON line
  int port = -1;
  for (int i = 0; i < 200 && port < 0; i++) {
    std::ifstream f(serve_out);
    std::string line;
    if (std::getline(f, line) && !line.empty()) {
      json j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("port")) port = j["port"].get<int>();
    }
    if (port < 0) std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  REQUIRE(port > 0);
  std::string at = " --host 127.0.0.1 --port " + std::to_string(port);

  CmdResult s1 = run("send" + at +
                     " --device 7 --timestamp-ms 1111 --position-mm 5"
                     " --class 1 --confidence-bp 9000");
  CHECK(s1.status == 0);
  CHECK(jline(s1.out)["acked"] == true);
  CmdResult s2 = run("send" + at +
                     " --device 8 --timestamp-ms 222 --class 0"
                     " --confidence-bp 100");
  CHECK(s2.status == 0);

  CmdResult all = run("reports --log " + log);
  REQUIRE(all.status == 0);
  json ja = jline(all.out);
  REQUIRE(ja["reports"].size() == 2);
  CHECK(ja["malformed"].empty());
  CHECK(ja["reports"][0]["timestamp_ms"] == 222);  // sorted by timestamp
  CHECK(ja["reports"][0]["device_id"] == 8);
  CHECK(ja["reports"][1]["timestamp_ms"] == 1111);
  CHECK(ja["reports"][1]["device_id"] == 7);
  CHECK(ja["reports"][1]["track_position_mm"] == 5);
  CHECK(ja["reports"][1]["confidence_bp"] == 9000);

  CmdResult by_class = run("reports --log " + log + " --class 1");
  REQUIRE(by_class.status == 0);
  json jc = jline(by_class.out);
  REQUIRE(jc["reports"].size() == 1);
  CHECK(jc["reports"][0]["device_id"] == 7);

  CmdResult windowed = run("reports --log " + log + " --from-ms 222 --to-ms 222");
  REQUIRE(windowed.status == 0);
  CHECK(jline(windowed.out)["reports"].size() == 1);

  kill(pid, SIGTERM);
  int st = 0;
  REQUIRE(waitpid(pid, &st, 0) == pid);
  server.pid = -1;  // reaped here; the guard must not wait again
  CHECK(WIFEXITED(st));
  CHECK(WEXITSTATUS(st) == 0);

  // with the server gone the same send must fail as a data error
  CHECK(run("send" + at + " --confidence-bp 1").status == 2);
  CHECK(run("reports --log " + kDir + "/no_such.jsonl").status == 2);
}
