#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "railnet/report.hpp"
#include "support/oracles.hpp"

using namespace railnet;

namespace {

template <class F>
std::optional<FrameError> decode_error_kind(F&& f) {
  try {
    f();
  } catch (const FrameDecodeError& e) {
    return e.kind();
  } catch (...) {
    return std::nullopt;
  }
  return std::nullopt;
}

template <class F>
std::string data_error_message(F&& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

FaultReport sample_report() {
  FaultReport r;
  r.device_id = 0x0102;
  r.timestamp_ms = 0x0102030405060708ull;
  r.track_position_mm = 0x1112131415161718ull;
  r.class_id = 1;
  r.confidence_bp = 9999;
  return r;
}

int connect_loopback(uint16_t port, int recv_timeout_ms) {
  const int fd = socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  timeval tv{};
  tv.tv_sec = recv_timeout_ms / 1000;
  tv.tv_usec = (recv_timeout_ms % 1000) * 1000;
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  REQUIRE(connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  return fd;
}

ssize_t recv_n(int fd, uint8_t* buf, size_t n) {
  size_t got = 0;
  while (got < n) {
    const ssize_t r = recv(fd, buf + got, n - got, 0);
    if (r <= 0) return r;
    got += size_t(r);
  }
  return ssize_t(got);
}

}  // namespace

TEST_CASE("crc16 check value and edge inputs") {
  const uint8_t check[] = {'1', '2', '3', '4', '5', '6', '7', '8', '9'};
  CHECK(crc16_ccitt_false(check, 9) == 0x29B1);
  CHECK(oracle::crc16(check, 9) == 0x29B1);

  CHECK(crc16_ccitt_false(nullptr, 0) == 0xFFFF);
  CHECK(oracle::crc16(nullptr, 0) == 0xFFFF);

  const uint8_t zero = 0x00;
  CHECK(crc16_ccitt_false(&zero, 1) == oracle::crc16(&zero, 1));
  const uint8_t ff = 0xFF;
  CHECK(crc16_ccitt_false(&ff, 1) == oracle::crc16(&ff, 1));
}

TEST_CASE("crc16 table-less implementation matches long-division oracle") {
  std::mt19937 rng(1);
  for (int rep = 0; rep < 400; ++rep) {
    std::vector<uint8_t> buf(rng() % 41);
    for (uint8_t& b : buf) b = uint8_t(rng());
    CHECK(crc16_ccitt_false(buf.data(), buf.size()) == oracle::crc16(buf));
  }
}

TEST_CASE("encode_frame wire layout") {
  const FaultReport r = sample_report();
  const std::vector<uint8_t> f = encode_frame(r);
  REQUIRE(f.size() == kReportFrameSize);

  CHECK(f[0] == 0x52);  // 'R'
  CHECK(f[1] == 0x46);  // 'F'
  CHECK(f[2] == 1);     // version
  CHECK(f[3] == 1);     // report type
  CHECK(f[4] == 0);     // length hi
  CHECK(f[5] == 21);    // length lo

  // payload, big-endian field by field
  CHECK(f[6] == 0x01);
  CHECK(f[7] == 0x02);
  for (int i = 0; i < 8; ++i) CHECK(f[8 + i] == uint8_t(i + 1));
  for (int i = 0; i < 8; ++i) CHECK(f[16 + i] == uint8_t(0x11 + i));
  CHECK(f[24] == 1);
  CHECK(f[25] == 0x27);  // 9999 = 0x270F
  CHECK(f[26] == 0x0F);

  // stored CRC covers version..payload and matches the independent oracle
  const uint16_t stored = uint16_t((uint16_t(f[27]) << 8) | f[28]);
  CHECK(stored == oracle::crc16(f.data() + 2, f.size() - 4));

  FaultReport overconfident = r;
  overconfident.confidence_bp = 10001;
  auto kind = decode_error_kind([&] { encode_frame(overconfident); });
  REQUIRE(kind.has_value());
  CHECK(*kind == FrameError::BadField);
}

TEST_CASE("encode_ack wire layout") {
  const std::vector<uint8_t> a = encode_ack(0xBEEF);
  REQUIRE(a.size() == kAckFrameSize);
  CHECK(a[3] == kFrameTypeAck);
  const FrameView v = parse_frame(a.data(), a.size());
  CHECK(v.type == kFrameTypeAck);
  REQUIRE(v.payload.size() == 2);
  CHECK(v.payload[0] == 0xBE);
  CHECK(v.payload[1] == 0xEF);
  CHECK(v.crc == oracle::crc16(a.data() + 2, a.size() - 4));
}

TEST_CASE("encode/decode roundtrips") {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 1000; ++rep) {
    FaultReport r;
    r.device_id = uint16_t(rng());
    r.timestamp_ms = rng();
    r.track_position_mm = rng();
    r.class_id = uint8_t(rng());
    r.confidence_bp = uint16_t(rng() % 10001);
    const FaultReport back = decode_frame(encode_frame(r));
    CHECK(back == r);
  }
}

TEST_CASE("parse_frame error kinds in pinned precedence") {
  const std::vector<uint8_t> good = encode_frame(sample_report());

  auto kind_of_bytes = [](std::vector<uint8_t> b) {
    return decode_error_kind([&] { parse_frame(b.data(), b.size()); });
  };

  // shorter than the magic
  auto k = kind_of_bytes({0x52});
  REQUIRE(k);
  CHECK(*k == FrameError::BadLength);

  // magic checked before anything else
  std::vector<uint8_t> wrong_magic = good;
  wrong_magic[0] = 0x00;
  k = kind_of_bytes(wrong_magic);
  REQUIRE(k);
  CHECK(*k == FrameError::BadMagic);

  // magic ok but header truncated
  k = kind_of_bytes({0x52, 0x46, 0x01});
  REQUIRE(k);
  CHECK(*k == FrameError::BadLength);

  // version checked before length mismatch and CRC
  std::vector<uint8_t> wrong_version = good;
  wrong_version[2] = 2;
  k = kind_of_bytes(wrong_version);
  REQUIRE(k);
  CHECK(*k == FrameError::BadVersion);

  // buffer size must equal header+payload+crc exactly
  std::vector<uint8_t> short_buf(good.begin(), good.end() - 1);
  k = kind_of_bytes(short_buf);
  REQUIRE(k);
  CHECK(*k == FrameError::BadLength);
  std::vector<uint8_t> long_buf = good;
  long_buf.push_back(0);
  k = kind_of_bytes(long_buf);
  REQUIRE(k);
  CHECK(*k == FrameError::BadLength);

  // CRC last
  std::vector<uint8_t> bad_payload = good;
  bad_payload[10] ^= 0x01;
  k = kind_of_bytes(bad_payload);
  REQUIRE(k);
  CHECK(*k == FrameError::BadCrc);
  std::vector<uint8_t> bad_crc = good;
  bad_crc[28] ^= 0x80;
  k = kind_of_bytes(bad_crc);
  REQUIRE(k);
  CHECK(*k == FrameError::BadCrc);

  // decode_frame adds type and payload checks on top
  auto dk = decode_error_kind([&] { decode_frame(encode_ack(0x1234)); });
  REQUIRE(dk);
  CHECK(*dk == FrameError::BadType);

  // report frame whose payload is the wrong size: hand-built empty payload
  std::vector<uint8_t> tiny{0x52, 0x46, 0x01, 0x01, 0x00, 0x00};
  const uint16_t c = crc16_ccitt_false(tiny.data() + 2, 4);
  tiny.push_back(uint8_t(c >> 8));
  tiny.push_back(uint8_t(c & 0xff));
  dk = decode_error_kind([&] { decode_frame(tiny); });
  REQUIRE(dk);
  CHECK(*dk == FrameError::BadLength);

  // well-formed frame, out-of-range confidence field
  std::vector<uint8_t> field = good;
  field[25] = 0x27;
  field[26] = 0x11;  // 10001
  const uint16_t c2 = crc16_ccitt_false(field.data() + 2, field.size() - 4);
  field[27] = uint8_t(c2 >> 8);
  field[28] = uint8_t(c2 & 0xff);
  dk = decode_error_kind([&] { decode_frame(field); });
  REQUIRE(dk);
  CHECK(*dk == FrameError::BadField);
}

TEST_CASE("every single-bit corruption of a frame is rejected") {
  const std::vector<uint8_t> good = encode_frame(sample_report());
  for (size_t bit = 0; bit < good.size() * 8; ++bit) {
    std::vector<uint8_t> damaged = good;
    damaged[bit / 8] ^= uint8_t(1u << (bit % 8));
    CHECK_THROWS_AS((void)decode_frame(damaged), FrameDecodeError);
  }
}

TEST_CASE("server logs valid reports and acks them") {
  const std::string log = "report_tmp_single.jsonl";
  std::remove(log.c_str());
  ReportServer srv("127.0.0.1", 0, log);
  srv.start();
  REQUIRE(srv.port() > 0);

  FaultReport r = sample_report();
  send_report("127.0.0.1", srv.port(), r, 2000);  // throws unless acked
  FaultReport r2 = sample_report();
  r2.device_id = 7;
  r2.timestamp_ms = 42;
  send_report("127.0.0.1", srv.port(), r2, 2000);
  srv.stop();

  ReportList list = list_reports(log, {});
  REQUIRE(list.entries.size() == 2);
  CHECK(list.malformed.empty());
  // sorted by timestamp: r2 (42) first
  CHECK(list.entries[0].report == r2);
  CHECK(list.entries[1].report == r);
  CHECK(list.entries[0].received_at_ms > 0);
  std::remove(log.c_str());
}

TEST_CASE("corrupted frame gets no ack and the connection stays usable") {
  const std::string log = "report_tmp_corrupt.jsonl";
  std::remove(log.c_str());
  ReportServer srv("127.0.0.1", 0, log);
  srv.start();

  const int fd = connect_loopback(srv.port(), 400);
  std::vector<uint8_t> bad = encode_frame(sample_report());
  bad[12] ^= 0xFF;  // payload corruption, framing intact
  REQUIRE(send(fd, bad.data(), bad.size(), 0) == ssize_t(bad.size()));
  uint8_t ackbuf[kAckFrameSize];
  CHECK(recv(fd, ackbuf, sizeof ackbuf, 0) < 0);  // timeout: no ack sent

  const std::vector<uint8_t> good = encode_frame(sample_report());
  REQUIRE(send(fd, good.data(), good.size(), 0) == ssize_t(good.size()));
  REQUIRE(recv_n(fd, ackbuf, kAckFrameSize) == ssize_t(kAckFrameSize));
  const FrameView v = parse_frame(ackbuf, kAckFrameSize);
  CHECK(v.type == kFrameTypeAck);
  const uint16_t sent_crc =
      uint16_t((uint16_t(good[27]) << 8) | good[28]);
  CHECK(uint16_t((uint16_t(v.payload[0]) << 8) | v.payload[1]) == sent_crc);
  close(fd);
  srv.stop();

  ReportList list = list_reports(log, {});
  CHECK(list.entries.size() == 1);  // only the intact frame was logged
  std::remove(log.c_str());
}

TEST_CASE("concurrent senders: every ack'd report appears exactly once") {
  const std::string log = "report_tmp_conc.jsonl";
  std::remove(log.c_str());
  ReportServer srv("127.0.0.1", 0, log);
  srv.start();

  constexpr int kThreads = 4;
  constexpr int kPerThread = 10;
  std::atomic<int> failures{0};
  std::vector<std::thread> workers;
  for (int t = 0; t < kThreads; ++t) {
    workers.emplace_back([&, t] {
      for (int i = 0; i < kPerThread; ++i) {
        FaultReport r;
        r.device_id = uint16_t(t * 100 + i);
        r.timestamp_ms = uint64_t(1000 + t * 100 + i);
        r.track_position_mm = 5;
        r.class_id = 0;
        r.confidence_bp = 8000;
        try {
          send_report("127.0.0.1", srv.port(), r, 5000);
        } catch (const DataError&) {
          ++failures;
        }
      }
    });
  }
  for (std::thread& w : workers) w.join();
  srv.stop();

  CHECK(failures.load() == 0);
  ReportList list = list_reports(log, {});
  CHECK(list.malformed.empty());
  REQUIRE(list.entries.size() == size_t(kThreads) * kPerThread);
  std::set<uint16_t> devices;
  for (const LogEntry& e : list.entries) devices.insert(e.report.device_id);
  CHECK(devices.size() == size_t(kThreads) * kPerThread);
  std::remove(log.c_str());
}

TEST_CASE("send_report failure modes carry distinct messages") {
  // nobody listening: grab an ephemeral port, close it, then dial it
  int probe = socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(probe >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = 0;
  inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(bind(probe, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  socklen_t alen = sizeof(addr);
  getsockname(probe, reinterpret_cast<sockaddr*>(&addr), &alen);
  const uint16_t dead_port = ntohs(addr.sin_port);
  close(probe);

  std::string msg = data_error_message(
      [&] { send_report("127.0.0.1", dead_port, sample_report(), 500); });
  CHECK(msg.find("cannot connect") != std::string::npos);

  // listening but mute: connection succeeds, the ack never comes
  int mute = socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(mute >= 0);
  addr.sin_port = 0;
  REQUIRE(bind(mute, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  REQUIRE(listen(mute, 4) == 0);
  alen = sizeof(addr);
  getsockname(mute, reinterpret_cast<sockaddr*>(&addr), &alen);
  msg = data_error_message([&] {
    send_report("127.0.0.1", ntohs(addr.sin_port), sample_report(), 400);
  });
  CHECK(msg == "timed out waiting for ack");
  close(mute);

  // server answers with the wrong CRC in the ack
  int liar = socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(liar >= 0);
  addr.sin_port = 0;
  REQUIRE(bind(liar, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  REQUIRE(listen(liar, 4) == 0);
  alen = sizeof(addr);
  getsockname(liar, reinterpret_cast<sockaddr*>(&addr), &alen);
  const uint16_t liar_port = ntohs(addr.sin_port);

  const std::vector<uint8_t> frame = encode_frame(sample_report());
  const uint16_t real_crc = uint16_t((uint16_t(frame[27]) << 8) | frame[28]);
  std::thread impostor([&] {
    const int c = accept(liar, nullptr, nullptr);
    if (c < 0) return;
    std::vector<uint8_t> buf(kReportFrameSize);
    recv_n(c, buf.data(), buf.size());
    const std::vector<uint8_t> ack = encode_ack(uint16_t(real_crc ^ 1));
    send(c, ack.data(), ack.size(), 0);
    close(c);
  });
  msg = data_error_message(
      [&] { send_report("127.0.0.1", liar_port, sample_report(), 2000); });
  CHECK(msg == "ack does not match the sent frame");
  impostor.join();
  close(liar);
}

TEST_CASE("list_reports: filters, ordering, malformed lines") {
  CHECK_THROWS_AS(list_reports("no_such.jsonl", {}), DataError);

  const std::string log = "report_tmp_list.jsonl";
  {
    std::ofstream f(log, std::ios::trunc);
    f << R"({"device_id":1,"timestamp_ms":300,"track_position_mm":5,"class_id":0,"confidence_bp":9000,"received_at_ms":11})"
      << "\n";
    f << "{not json\n";
    f << "\n";
    f << R"({"device_id":2})" << "\n";
    f << R"({"device_id":3,"timestamp_ms":100,"track_position_mm":6,"class_id":1,"confidence_bp":8000,"received_at_ms":12})"
      << "\n";
    f << R"({"device_id":4,"timestamp_ms":200,"track_position_mm":7,"class_id":0,"confidence_bp":7000,"received_at_ms":13})"
      << "\n";
  }

  ReportList all = list_reports(log, {});
  REQUIRE(all.entries.size() == 3);
  CHECK(all.entries[0].report.timestamp_ms == 100);
  CHECK(all.entries[1].report.timestamp_ms == 200);
  CHECK(all.entries[2].report.timestamp_ms == 300);
  REQUIRE(all.malformed.size() == 2);
  CHECK(all.malformed[0].first == 2);  // 1-based line numbers
  CHECK(all.malformed[1].first == 4);

  ReportFilter by_class;
  by_class.class_id = 0;
  ReportList c0 = list_reports(log, by_class);
  REQUIRE(c0.entries.size() == 2);
  CHECK(c0.entries[0].report.device_id == 4);
  CHECK(c0.entries[1].report.device_id == 1);

  ReportFilter window;
  window.from_ms = 100;
  window.to_ms = 200;  // both bounds inclusive
  ReportList win = list_reports(log, window);
  REQUIRE(win.entries.size() == 2);
  CHECK(win.entries[0].report.timestamp_ms == 100);
  CHECK(win.entries[1].report.timestamp_ms == 200);

  window.from_ms = 101;
  window.to_ms = 199;
  CHECK(list_reports(log, window).entries.empty());

  // an empty but existing log is fine
  {
    std::ofstream f(log, std::ios::trunc);
  }
  ReportList empty = list_reports(log, {});
  CHECK(empty.entries.empty());
  CHECK(empty.malformed.empty());
  std::remove(log.c_str());
}
