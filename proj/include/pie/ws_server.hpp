#pragma once

// Websocket live server. Three roles: the simulation loop owns the Session,
// the render worker turns snapshots into frames, and the I/O context parses
// commands and ships messages. Frames are droppable; stepping never waits on
// a client.

#include "pie/session.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

namespace pie {

struct ServerOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0 picks a free port
  bool start_paused = false;
  bool realtime = true;     // pace steps to dt of wall time
  double stats_interval_ms = 100.0;
};

class LiveServer {
  using tcp = boost::asio::ip::tcp;
  using Clock = std::chrono::steady_clock;

  struct Outgoing {
    std::string text;
    int slot = -1;  // >= 0: only the newest pending message per slot is kept
  };
  enum Slot { kFrame = 0, kStats = 1 };

  class Connection : public std::enable_shared_from_this<Connection> {
   public:
    Connection(tcp::socket socket, LiveServer& server) : ws_(std::move(socket)), server_(server) {}

    void start(bool reject) {
      reject_ = reject;
      ws_.set_option(boost::beast::websocket::stream_base::timeout::suggested(boost::beast::role_type::server));
      ws_.async_accept([self = shared_from_this()](boost::beast::error_code ec) { self->on_accept(ec); });
    }

    /// I/O thread only.
    void enqueue(Outgoing o) {
      if (closed_) return;
      if (o.slot >= 0) {
        for (std::size_t i = writing_ ? 1 : 0; i < out_.size(); ++i)
          if (out_[i].slot == o.slot) {
            out_[i] = std::move(o);
            return;
          }
      }
      out_.push_back(std::move(o));
      if (!writing_) write_next();
    }

    void close() {
      if (closed_) return;
      closed_ = true;
      boost::beast::error_code ec;
      boost::beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
      boost::beast::get_lowest_layer(ws_).close();
    }

   private:
    boost::beast::websocket::stream<boost::beast::tcp_stream> ws_;
    LiveServer& server_;
    boost::beast::flat_buffer buffer_;
    std::deque<Outgoing> out_;
    bool writing_ = false;
    bool closed_ = false;
    bool reject_ = false;

    void on_accept(boost::beast::error_code ec) {
      if (ec) return finish();
      ws_.text(true);
      if (reject_) {
        enqueue({msg::error("not_ready", "another session is already active").dump()});
        return;
      }
      server_.on_open(shared_from_this());
      read_next();
    }

    void read_next() {
      ws_.async_read(buffer_, [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
        if (ec) return self->finish();
        const std::string text = boost::beast::buffers_to_string(self->buffer_.data());
        self->buffer_.consume(self->buffer_.size());
        self->server_.on_message(self, text);
        self->read_next();
      });
    }

    void write_next() {
      writing_ = true;
      ws_.async_write(boost::asio::buffer(out_.front().text),
                      [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
                        self->out_.pop_front();
                        self->writing_ = false;
                        if (ec) return self->finish();
                        if (self->reject_ && self->out_.empty()) return self->finish();
                        if (!self->out_.empty()) self->write_next();
                      });
    }

    void finish() {
      const bool was_open = !closed_;
      close();
      if (was_open && !reject_) server_.on_close(shared_from_this());
    }
  };

 public:
  LiveServer(Session& session, ServerOptions opt)
      : session_(session), opt_(opt), acceptor_(ioc_) {
    const tcp::endpoint ep(boost::asio::ip::make_address(opt_.address), opt_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(boost::asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
    if (opt_.start_paused) session_.submit(Json{{"type", "pause"}});
  }

  ~LiveServer() { stop(); }
  LiveServer(const LiveServer&) = delete;
  LiveServer& operator=(const LiveServer&) = delete;

  unsigned short port() const { return port_; }

  /// Spawns the I/O, simulation and render threads.
  void start() {
    if (running_.exchange(true)) return;
    accept_next();
    {
      // Frame 0 is the state before any step.
      std::lock_guard lock(snap_mutex_);
      latest_ = session_.snapshot();
      snapshot_dirty_ = true;
    }
    io_thread_ = std::thread([this] { ioc_.run(); });
    sim_thread_ = std::thread([this] { sim_loop(); });
    render_thread_ = std::thread([this] { render_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    snap_cv_.notify_all();
    if (sim_thread_.joinable()) sim_thread_.join();
    if (render_thread_.joinable()) render_thread_.join();
    boost::asio::post(ioc_, [this] {
      boost::beast::error_code ec;
      acceptor_.close(ec);
      if (conn_) conn_->close();
      conn_.reset();
    });
    ioc_.stop();
    if (io_thread_.joinable()) io_thread_.join();
  }

  /// Blocks until stop() is called from another thread or a signal handler.
  void wait() {
    while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }

 private:
  Session& session_;
  ServerOptions opt_;
  boost::asio::io_context ioc_;
  tcp::acceptor acceptor_;
  unsigned short port_ = 0;
  std::shared_ptr<Connection> conn_;  // I/O thread only
  std::atomic<bool> running_{false};
  std::thread io_thread_, sim_thread_, render_thread_;

  std::mutex snap_mutex_;
  std::condition_variable snap_cv_;
  Snapshot latest_;
  bool snapshot_dirty_ = false;

  std::mutex frame_mutex_;  // orders seq assignment against resets
  long frame_seq_ = 0;
  long current_epoch_ = 0;
  std::atomic<long> stats_seq_{0};
  std::atomic<double> last_render_ms_{0.0};
  std::atomic<int> frames_rendered_{0};

  void accept_next() {
    acceptor_.async_accept([this](boost::beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      auto c = std::make_shared<Connection>(std::move(socket), *this);
      c->start(conn_ != nullptr);
      accept_next();
    });
  }

  void on_open(std::shared_ptr<Connection> c) {
    conn_ = std::move(c);
    // A new client gets the current state straight away.
    std::lock_guard lock(snap_mutex_);
    snapshot_dirty_ = true;
    snap_cv_.notify_all();
  }

  void on_close(const std::shared_ptr<Connection>& c) {
    if (conn_ == c) conn_.reset();
  }

  void on_message(const std::shared_ptr<Connection>& c, const std::string& text) {
    Json m;
    try {
      m = Json::parse(text);
    } catch (const Json::parse_error& e) {
      c->enqueue({msg::error("bad_message", std::string("invalid JSON: ") + e.what()).dump()});
      return;
    }
    if (auto reply = session_.submit(m)) c->enqueue({reply->dump()});
  }

  /// Thread-safe send; the connection may already be gone.
  void send(Json m, int slot = -1) {
    boost::asio::post(ioc_, [this, o = Outgoing{m.dump(), slot}]() mutable {
      if (conn_) conn_->enqueue(std::move(o));
    });
  }

  void sim_loop() {
    auto last_stats = Clock::now() - std::chrono::hours(1);
    auto fps_window = Clock::now();
    double fps = 0.0;
    while (running_) {
      const auto t0 = Clock::now();
      Session::TickResult r = session_.tick();
      for (auto& reply : r.replies) send(std::move(reply));
      if (r.reset) {
        // Rendered here, before any further step, so the next frame shows the rest pose.
        const Snapshot s = session_.snapshot();
        const RenderedFrame f = render_snapshot(s, session_.field(), session_.config().camera, session_.render_params());
        std::lock_guard lock(frame_mutex_);
        current_epoch_ = s.epoch;
        send(msg::frame(frame_seq_++, s.step, f.image));
      }
      if (r.overlay_requested) {
        const Snapshot s = session_.snapshot();
        std::lock_guard lock(frame_mutex_);
        send(msg::overlay(frame_seq_, snapshot_overlay(s, session_.config().camera)));
      }
      if (r.stepped) {
        std::lock_guard lock(snap_mutex_);
        latest_ = session_.snapshot();
        snapshot_dirty_ = true;
        snap_cv_.notify_all();
      }
      const auto now = Clock::now();
      const double since_fps = std::chrono::duration<double>(now - fps_window).count();
      if (since_fps >= 1.0) {
        fps = frames_rendered_.exchange(0) / since_fps;
        fps_window = now;
      }
      if (std::chrono::duration<double, std::milli>(now - last_stats).count() >= opt_.stats_interval_ms || r.stepped) {
        msg::Stats st;
        st.seq = stats_seq_++;
        st.step = session_.state().step;
        st.paused = session_.paused();
        st.newton_iters = session_.last_report().newton_iterations;
        st.assembly_ms = session_.last_report().assembly_ms;
        st.solve_ms = session_.last_report().solve_ms;
        st.warp_render_ms = last_render_ms_;
        st.fps = fps;
        st.volume_ratio = session_.simulator().volume_ratio(session_.state().q);
        send(msg::stats(st), kStats);
        last_stats = now;
      }
      const double dt = session_.simulator().dynamics().dt;
      auto until = t0 + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(dt));
      if (!r.stepped) until = t0 + std::chrono::milliseconds(10);
      if (opt_.realtime || !r.stepped) std::this_thread::sleep_until(until);
    }
  }

  void render_loop() {
    while (running_) {
      Snapshot s;
      {
        std::unique_lock lock(snap_mutex_);
        snap_cv_.wait_for(lock, std::chrono::milliseconds(100), [this] { return snapshot_dirty_ || !running_; });
        if (!running_) return;
        if (!snapshot_dirty_) continue;
        s = latest_;
        snapshot_dirty_ = false;
      }
      const RenderedFrame f = render_snapshot(s, session_.field(), session_.config().camera, session_.render_params());
      last_render_ms_ = f.ms;
      ++frames_rendered_;
      std::lock_guard lock(frame_mutex_);
      if (s.epoch < current_epoch_) continue;  // superseded by a reset
      send(msg::frame(frame_seq_++, s.step, f.image), kFrame);
    }
  }
};

}  // namespace pie
