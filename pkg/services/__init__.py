# サービス層パッケージ 