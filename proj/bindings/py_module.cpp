#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tweo/diagnostics.hpp"
#include "tweo/fp8.hpp"
#include "tweo/quantizer.hpp"
#include "tweo/svd.hpp"
#include "tweo/tweo_loss.hpp"

namespace py = pybind11;
using namespace tweo;

namespace {

Shape shape_of(const py::buffer_info& info) {
  Shape s;
  for (auto d : info.shape) s.push_back(static_cast<size_t>(d));
  return s;
}

double py_tweo_penalty(const std::vector<py::array_t<float, py::array::c_style |
                                                                py::array::forcecast>>& taps,
                       double tau, int p, double eps) {
  TweoConfig cfg;
  cfg.tau = tau;
  cfg.p = p;
  cfg.eps = eps;
  cfg.validate();
  std::vector<Tensor<float>> ts;
  for (const auto& a : taps) {
    py::buffer_info info = a.request();
    const float* ptr = static_cast<const float*>(info.ptr);
    ts.push_back(Tensor<float>::from(shape_of(info),
                                     std::vector<float>(ptr, ptr + info.size)));
  }
  return tweo_penalty_value(ts, cfg);
}

py::array_t<float> py_absmax_qdq(
    py::array_t<float, py::array::c_style | py::array::forcecast> x, int bits,
    const std::string& gran, const std::string& role) {
  py::buffer_info info = x.request();
  QuantGran g = gran_from_letter(gran.empty() ? 'T' : gran[0]);
  QuantRole r;
  if (role == "weight")
    r = QuantRole::WEIGHT;
  else if (role == "activation")
    r = QuantRole::ACTIVATION;
  else
    throw ContractError("role must be 'weight' or 'activation'");
  Quantized q = absmax_quantize(static_cast<const float*>(info.ptr), shape_of(info), bits, g, r);
  py::array_t<float> out(info.shape);
  absmax_dequantize(q, static_cast<float*>(out.request().ptr));
  return out;
}

py::array_t<double> py_singular_values(
    py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  py::buffer_info info = a.request();
  if (info.ndim != 2) throw DimError("expected a rank-2 array");
  SvdResult r = jacobi_svd(static_cast<const double*>(info.ptr),
                           static_cast<size_t>(info.shape[0]),
                           static_cast<size_t>(info.shape[1]));
  // the shape+data constructor copies with proper strides; the bare count
  // constructor produced a zero-stride view under pybind11 3.x
  return py::array_t<double>(std::vector<py::ssize_t>{py::ssize_t(r.S.size())}, r.S.data());
}

py::dict py_colinearity(py::array_t<double, py::array::c_style | py::array::forcecast> A,
                        py::array_t<double, py::array::c_style | py::array::forcecast> w,
                        py::array_t<double, py::array::c_style | py::array::forcecast> x,
                        const std::string& act, size_t budget) {
  py::buffer_info ia = A.request(), iw = w.request(), ix = x.request();
  if (ia.ndim != 2) throw DimError("A must be rank-2");
  const size_t d2 = ia.shape[0], d1 = ia.shape[1];
  if (static_cast<size_t>(iw.size) != d2 || static_cast<size_t>(ix.size) != d1)
    throw DimError("w must have A's rows, x its columns");
  ColinearityReport r = svd_colinearity(
      static_cast<const double*>(ia.ptr), d2, d1, static_cast<const double*>(iw.ptr),
      static_cast<const double*>(ix.ptr), probe_activation_from_name(act), budget);
  py::dict d;
  d["sum_linear"] = r.sum_linear;
  d["direct_linear"] = r.direct_linear;
  d["dominant"] = r.dominant;
  d["dominant_share"] = r.dominant_share;
  d["sim_act"] = r.sim_act;
  d["true_act"] = r.true_act;
  d["rel_err_linear"] = r.rel_err_linear;
  d["rel_err_act"] = r.rel_err_act;
  py::list triples;
  for (const auto& t : r.triples) {
    py::dict td;
    td["s"] = t.s;
    td["w_u"] = t.w_u;
    td["v_x"] = t.v_x;
    td["product"] = t.product;
    triples.append(td);
  }
  d["triples"] = triples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Outlier-aware training lab: penalty, FP8 codec, quantizer, SVD diagnostics";

  m.def("tweo_penalty", &py_tweo_penalty, py::arg("taps"), py::arg("tau") = 3.0,
        py::arg("p") = 4, py::arg("eps") = 1e-6,
        "Mean ((|a|/(tau+eps))^p) over each tap, averaged across taps.");

  m.def(
      "tweo_lambda",
      [](double lambda0, const std::string& schedule, size_t horizon, size_t step,
         size_t total) {
        TweoConfig cfg;
        cfg.lambda0 = lambda0;
        cfg.schedule = schedule_from_name(schedule);
        cfg.horizon = horizon;
        return tweo_lambda(cfg, step, total);
      },
      py::arg("lambda0"), py::arg("schedule"), py::arg("horizon"), py::arg("step"),
      py::arg("total"));

  m.def(
      "fp8_encode",
      [](double v, const std::string& fmt) {
        return fp8::encode(v, fp8::format_from_name(fmt));
      },
      py::arg("value"), py::arg("format"));
  m.def(
      "fp8_decode",
      [](uint8_t code, const std::string& fmt) {
        return fp8::decode(code, fp8::format_from_name(fmt));
      },
      py::arg("code"), py::arg("format"));
  m.def(
      "fp8_max_finite",
      [](const std::string& fmt) { return fp8::spec_of(fp8::format_from_name(fmt)).max_finite; },
      py::arg("format"));

  m.def("absmax_quantize_dequantize", &py_absmax_qdq, py::arg("x"), py::arg("bits") = 8,
        py::arg("granularity") = "T", py::arg("role") = "weight");

  m.def("singular_values", &py_singular_values, py::arg("a"),
        "Descending singular values via one-sided Jacobi (float64).");

  m.def("colinearity", &py_colinearity, py::arg("A"), py::arg("w"), py::arg("x"),
        py::arg("act") = "gelu", py::arg("budget") = 8);
}
