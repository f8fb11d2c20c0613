#include "uccl/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "uccl/config.hpp"
#include "uccl/trainer.hpp"

namespace uccl {

namespace {

namespace fs = std::filesystem;

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{
    {0, 0, 0},
    {230, 25, 75},
    {60, 180, 75},
    {0, 130, 200},
    {255, 225, 25},
    {145, 30, 180},
    {245, 130, 48},
    {70, 240, 240},
}};

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;  // NaN for empty cells

    int column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        return it == header.end() ? -1 : static_cast<int>(it - header.begin());
    }
};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

Table read_table(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("missing " + file.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) return t;
    t.header = split_csv(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        for (const auto& cell : split_csv(line)) {
            row.push_back(cell.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell));
        }
        row.resize(t.header.size(), std::numeric_limits<double>::quiet_NaN());
        t.rows.push_back(std::move(row));
    }
    return t;
}

cv::Scalar bgr(int c) {
    const auto rgb = class_color(c);
    return {static_cast<double>(rgb[2]), static_cast<double>(rgb[1]), static_cast<double>(rgb[0])};
}

struct Series {
    std::string name;
    std::vector<double> x, y;
};

// Line chart on a white canvas; non-finite points are dropped.
cv::Mat line_chart(const std::string& title, const std::string& x_label, const std::vector<Series>& series) {
    const int W = 720, H = 440, left = 70, right = 170, top = 40, bottom = 50;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 <= x0) x1 = x0 + 1;
    y0 = std::min(y0, 0.0);
    if (y1 <= y0) y1 = y0 + 1;

    const cv::Point origin(left, H - bottom);
    const int pw = W - left - right, ph = H - top - bottom;
    auto to_px = [&](double x, double y) {
        return cv::Point(left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * pw)),
                         H - bottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * ph)));
    };
    const cv::Scalar ink(40, 40, 40);
    cv::line(img, origin, {left, top}, ink, 1);
    cv::line(img, origin, {W - right, H - bottom}, ink, 1);
    for (int k = 0; k <= 4; ++k) {
        const double yv = y0 + (y1 - y0) * k / 4.0;
        const cv::Point p = to_px(x0, yv);
        cv::line(img, p, {p.x - 4, p.y}, ink, 1);
        std::ostringstream label;
        label.precision(3);
        label << yv;
        cv::putText(img, label.str(), {4, p.y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, ink, 1, cv::LINE_AA);
    }
    std::ostringstream xmax;
    xmax << static_cast<long long>(std::llround(x1));
    cv::putText(img, xmax.str(), {W - right - 20, H - bottom + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, ink, 1, cv::LINE_AA);
    cv::putText(img, x_label, {left + pw / 2 - 20, H - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, ink, 1, cv::LINE_AA);
    cv::putText(img, title, {left, 26}, cv::FONT_HERSHEY_SIMPLEX, 0.6, ink, 1, cv::LINE_AA);

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const cv::Scalar color = bgr(static_cast<int>(k) + 1);
        std::vector<cv::Point> pts;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (std::isfinite(s.y[i])) pts.push_back(to_px(s.x[i], s.y[i]));
        }
        if (pts.size() == 1) cv::circle(img, pts[0], 3, color, cv::FILLED, cv::LINE_AA);
        if (pts.size() > 1) cv::polylines(img, pts, false, color, 1, cv::LINE_AA);
        const int ly = top + 10 + 20 * static_cast<int>(k);
        cv::line(img, {W - right + 12, ly}, {W - right + 36, ly}, color, 2);
        cv::putText(img, s.name, {W - right + 42, ly + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.45, ink, 1, cv::LINE_AA);
    }
    return img;
}

cv::Mat to_mat(const Tensor& image) {
    const int H = image.dim(1), W = image.dim(2);
    cv::Mat out(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            auto& px = out.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                px[2 - c] = cv::saturate_cast<unsigned char>(std::lround(std::clamp(image(c, y, x), 0.0f, 1.0f) * 255.0f));
            }
        }
    }
    return out;
}

void write_png(const fs::path& file, const cv::Mat& img) {
    if (!cv::imwrite(file.string(), img)) throw std::runtime_error("cannot write " + file.string());
}

}  // namespace

std::array<std::uint8_t, 3> class_color(int c) {
    if (c < 0) throw std::invalid_argument("class_color: negative class");
    return kPalette[static_cast<std::size_t>(c) % kPalette.size()];
}

Tensor colorize(const LabelMap& labels) {
    const int H = labels.dim(0), W = labels.dim(1);
    Tensor out({3, H, W});
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const auto rgb = class_color(labels(y, x));
            for (int c = 0; c < 3; ++c) out(c, y, x) = rgb[static_cast<std::size_t>(c)] / 255.0f;
        }
    }
    return out;
}

std::vector<fs::path> plot_run(const fs::path& run_dir, std::ostream& warn, int panel_scenes) {
    const Table metrics = read_table(run_dir / "metrics.csv");
    if (metrics.rows.empty()) throw std::runtime_error("no metrics rows in " + (run_dir / "metrics.csv").string());
    const fs::path figures = run_dir / "figures";
    fs::create_directories(figures);
    std::vector<fs::path> written;

    const int step_col = metrics.column("step");
    std::vector<Series> losses;
    for (const char* name : {"l_s", "l_x", "l_su", "l_cr", "total"}) {
        const int col = metrics.column(name);
        if (col < 0 || step_col < 0) throw std::runtime_error("metrics.csv lacks column " + std::string(name));
        Series s{name, {}, {}};
        for (const auto& r : metrics.rows) {
            s.x.push_back(r[static_cast<std::size_t>(step_col)]);
            s.y.push_back(r[static_cast<std::size_t>(col)]);
        }
        losses.push_back(std::move(s));
    }
    written.push_back(figures / "loss_curve.png");
    write_png(written.back(), line_chart("training losses", "step", losses));

    const fs::path eval_file = run_dir / "eval.csv";
    const Table evals = fs::exists(eval_file) ? read_table(eval_file) : Table{};
    if (evals.rows.empty()) {
        warn << "warning: no evaluation rows in " << eval_file.string() << "; mIoU curve skipped\n";
    } else {
        Series s{"mIoU", {}, {}};
        const int sc = evals.column("step"), mc = evals.column("miou");
        if (sc < 0 || mc < 0) throw std::runtime_error("eval.csv lacks step/miou columns");
        for (const auto& r : evals.rows) {
            s.x.push_back(r[static_cast<std::size_t>(sc)]);
            s.y.push_back(r[static_cast<std::size_t>(mc)]);
        }
        written.push_back(figures / "miou_curve.png");
        write_png(written.back(), line_chart("validation mIoU", "step", {s}));
    }

    fs::path ckpt = run_dir / "checkpoints" / "best.ckpt";
    if (!fs::exists(ckpt)) ckpt = run_dir / "checkpoints" / "final.ckpt";
    if (!fs::exists(ckpt)) {
        warn << "warning: no checkpoint under " << (run_dir / "checkpoints").string() << "; prediction panel skipped\n";
        return written;
    }
    const TrainConfig cfg = load_config(run_dir / "config.json");
    const Model model = load_checkpoint(ckpt).state.params;
    DatasetConfig dc = cfg.dataset;
    dc.val_count = std::min(dc.val_count, panel_scenes);
    const std::vector<Scene> scenes = generate_validation(dc);
    if (scenes.empty()) return written;

    const int H = cfg.dataset.height, W = cfg.dataset.width, gap = 4;
    cv::Mat panel(static_cast<int>(scenes.size()) * (H + gap) + gap, 3 * (W + gap) + gap, CV_8UC3, cv::Scalar(255, 255, 255));
    for (std::size_t k = 0; k < scenes.size(); ++k) {
        Tensor batch({1, 3, H, W});
        std::copy_n(scenes[k].image.data(), scenes[k].image.size(), batch.data());
        const LabelMap batch_pred = predict(model, batch);
        LabelMap pred({H, W});
        std::copy_n(batch_pred.data(), pred.size(), pred.data());
        const int y = gap + static_cast<int>(k) * (H + gap);
        to_mat(scenes[k].image).copyTo(panel(cv::Rect(gap, y, W, H)));
        to_mat(colorize(scenes[k].mask)).copyTo(panel(cv::Rect(2 * gap + W, y, W, H)));
        to_mat(colorize(pred)).copyTo(panel(cv::Rect(3 * gap + 2 * W, y, W, H)));
    }
    cv::Mat scaled;
    cv::resize(panel, scaled, {}, 3.0, 3.0, cv::INTER_NEAREST);
    written.push_back(figures / "predictions.png");
    write_png(written.back(), scaled);
    return written;
}

}  // namespace uccl
